#include "engram/eval.hpp"

#include <json.hpp>

#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <unordered_map>

namespace engram {

namespace {

std::vector<std::string> answer_tokens(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

}  // namespace

std::string normalize_answer(const std::string& s) {
  std::string out;
  for (const auto& t : answer_tokens(s)) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

float token_f1(const std::string& prediction, const std::string& gold) {
  auto p = answer_tokens(prediction);
  auto g = answer_tokens(gold);
  if (p.empty() && g.empty()) return 1.0f;
  if (p.empty() || g.empty()) return 0.0f;
  std::unordered_map<std::string, int> counts;
  for (const auto& t : g) ++counts[t];
  int overlap = 0;
  for (const auto& t : p) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0f;
  const float precision = static_cast<float>(overlap) / static_cast<float>(p.size());
  const float recall = static_cast<float>(overlap) / static_cast<float>(g.size());
  return 2.0f * precision * recall / (precision + recall);
}

int evidence_lag(const Dialogue& d, const QAItem& q) {
  ENGRAM_CHECK(!q.evidence.empty(), Error::Kind::Validation, "QA item '", q.question,
               "' has no evidence turns");
  int earliest = std::numeric_limits<int>::max();
  for (const auto& [s, t] : q.evidence) earliest = std::min(earliest, d.global_index(s, t));
  const int lag = q.ask_after_turn - earliest;
  ENGRAM_CHECK(lag >= 0, Error::Kind::Validation, "QA item '", q.question,
               "' asks at turn ", q.ask_after_turn, " before its evidence at ", earliest);
  return lag;
}

float retained_score(float f1_mem, float f1_ablated) {
  ENGRAM_CHECK(f1_mem >= 0.0f && f1_mem <= 1.0f && f1_ablated >= 0.0f && f1_ablated <= 1.0f,
               Error::Kind::Value, "F1 scores must lie in [0,1]");
  return std::max(0.0f, f1_mem - f1_ablated);
}

std::vector<float> pava_nonincreasing(const std::vector<float>& values,
                                      const std::vector<float>& weights) {
  ENGRAM_CHECK(values.size() == weights.size(), Error::Kind::Shape,
               "values and weights differ in length");
  struct Pool {
    double w, wv;
    size_t len;
    double mean() const { return wv / w; }
  };
  std::vector<Pool> pools;
  for (size_t i = 0; i < values.size(); ++i) {
    ENGRAM_CHECK(weights[i] > 0.0f, Error::Kind::Value, "weight ", i, " must be positive");
    pools.push_back({static_cast<double>(weights[i]),
                     static_cast<double>(weights[i]) * static_cast<double>(values[i]), 1});
    while (pools.size() >= 2 && pools[pools.size() - 2].mean() < pools.back().mean()) {
      pools[pools.size() - 2].w += pools.back().w;
      pools[pools.size() - 2].wv += pools.back().wv;
      pools[pools.size() - 2].len += pools.back().len;
      pools.pop_back();
    }
  }
  std::vector<float> out;
  out.reserve(values.size());
  for (const auto& p : pools)
    for (size_t i = 0; i < p.len; ++i) out.push_back(static_cast<float>(p.mean()));
  return out;
}

EvalCurve bucket_and_smooth(const std::vector<QuestionResult>& results) {
  ENGRAM_CHECK(!results.empty(), Error::Kind::Value, "no question results to bucket");
  EvalCurve curve;
  std::array<double, kNumLagBuckets> sums{};
  for (const auto& r : results) {
    const int b = lag_bucket(r.lag);
    sums[static_cast<size_t>(b)] += r.retained;
    ++curve.counts[static_cast<size_t>(b)];
  }
  const float nan = std::numeric_limits<float>::quiet_NaN();
  std::vector<float> vals, weights;
  std::vector<size_t> where;
  for (size_t b = 0; b < kNumLagBuckets; ++b) {
    if (curve.counts[b] == 0) {
      curve.raw[b] = nan;
      curve.smoothed[b] = nan;
      continue;
    }
    curve.raw[b] = static_cast<float>(sums[b] / curve.counts[b]);
    vals.push_back(curve.raw[b]);
    weights.push_back(static_cast<float>(curve.counts[b]));
    where.push_back(b);
  }
  auto fit = pava_nonincreasing(vals, weights);
  for (size_t i = 0; i < where.size(); ++i) curve.smoothed[where[i]] = fit[i];
  return curve;
}

std::pair<std::vector<float>, float> knowledge_curve(const std::vector<QuestionResult>& results,
                                                     int n_sessions, std::vector<int>* carried) {
  ENGRAM_CHECK(n_sessions > 0, Error::Kind::Value, "n_sessions must be positive");
  std::vector<double> mem(static_cast<size_t>(n_sessions), 0.0);
  std::vector<double> base(static_cast<size_t>(n_sessions), 0.0);
  std::vector<int> counts(static_cast<size_t>(n_sessions), 0);
  for (const auto& r : results) {
    ENGRAM_CHECK(r.session >= 0 && r.session < n_sessions, Error::Kind::Validation,
                 "question session ", r.session, " outside ", n_sessions, " sessions");
    mem[static_cast<size_t>(r.session)] += r.f1_mem;
    base[static_cast<size_t>(r.session)] += r.f1_baseline;
    counts[static_cast<size_t>(r.session)] += 1;
  }
  std::vector<float> k;
  k.reserve(static_cast<size_t>(n_sessions));
  double mem_acc = 0.0, base_acc = 0.0;
  int n_acc = 0;
  float prev = 0.0f;
  for (int s = 0; s < n_sessions; ++s) {
    mem_acc += mem[static_cast<size_t>(s)];
    base_acc += base[static_cast<size_t>(s)];
    n_acc += counts[static_cast<size_t>(s)];
    if (counts[static_cast<size_t>(s)] == 0) {
      if (carried) carried->push_back(s);
      k.push_back(prev);
      continue;
    }
    prev = static_cast<float>((mem_acc - base_acc) / n_acc * 100.0);
    k.push_back(prev);
  }
  const float delta = k.empty() ? 0.0f : k.back();
  return {std::move(k), delta};
}

uint64_t corpus_hash(const std::vector<Dialogue>& corpus) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& d : corpus) {
    h = fnv1a64_values(std::vector<uint64_t>{d.seed}, h);
    for (const auto& s : d.sessions)
      for (const auto& t : s.turns) {
        h = fnv1a64(t.speaker, h);
        h = fnv1a64(t.text, h);
      }
    for (const auto& q : d.qa) {
      h = fnv1a64(q.question, h);
      h = fnv1a64(q.answer, h);
      h = fnv1a64_values(std::vector<int>{q.ask_after_turn, q.session}, h);
      for (const auto& [s, t] : q.evidence) h = fnv1a64_values(std::vector<int>{s, t}, h);
    }
  }
  return h;
}

namespace {

std::string csv_float(float v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", static_cast<double>(v));
  return buf;
}

void write_outputs(const std::string& dir, const ProtocolOptions& opts, const ProtocolResult& res,
                   int n_sessions) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  std::ofstream results(dir + "/results.jsonl");
  ENGRAM_CHECK(results.good(), Error::Kind::Io, "cannot write ", dir, "/results.jsonl");
  for (const auto& q : res.questions) {
    nlohmann::json row;
    row["dialogue"] = q.dialogue;
    row["session"] = q.session;
    row["lag"] = q.lag;
    row["f1_mem"] = q.f1_mem;
    row["f1_ablated"] = q.f1_ablated;
    row["f1_baseline"] = q.f1_baseline;
    row["retained"] = q.retained;
    row["input_hash"] = to_hex(q.input_hash);
    row["prediction"] = q.prediction;
    row["gold"] = q.gold;
    results << row.dump() << "\n";
  }

  std::ofstream curve(dir + "/curve.csv");
  ENGRAM_CHECK(curve.good(), Error::Kind::Io, "cannot write ", dir, "/curve.csv");
  curve << "bucket,raw,smoothed,count\n";
  for (size_t b = 0; b < kNumLagBuckets; ++b)
    curve << '"' << lag_bucket_label(static_cast<int>(b)) << "\"," << csv_float(res.curve.raw[b])
          << ',' << csv_float(res.curve.smoothed[b]) << ',' << res.curve.counts[b] << "\n";

  std::ofstream ks(dir + "/k.csv");
  ENGRAM_CHECK(ks.good(), Error::Kind::Io, "cannot write ", dir, "/k.csv");
  ks << "session,k\n";
  for (size_t s = 0; s < res.curve.k_series.size(); ++s)
    ks << s << ',' << csv_float(res.curve.k_series[s]) << "\n";

  nlohmann::json summary;
  summary["method"] = opts.method_label;
  summary["capacity"] = opts.capacity;
  summary["n_questions"] = res.questions.size();
  summary["n_sessions"] = n_sessions;
  summary["min_retained_pct"] = res.min_retained_pct;
  summary["delta_k"] = res.delta_k;
  summary["corpus_hash"] = to_hex(res.corpus_hash);
  nlohmann::json buckets = nlohmann::json::array();
  for (size_t b = 0; b < kNumLagBuckets; ++b) {
    nlohmann::json jb;
    jb["label"] = lag_bucket_label(static_cast<int>(b));
    jb["raw"] = std::isnan(res.curve.raw[b]) ? nlohmann::json() : nlohmann::json(res.curve.raw[b]);
    jb["smoothed"] = std::isnan(res.curve.smoothed[b]) ? nlohmann::json()
                                                       : nlohmann::json(res.curve.smoothed[b]);
    jb["count"] = res.curve.counts[b];
    buckets.push_back(jb);
  }
  summary["buckets"] = buckets;
  std::ofstream sf(dir + "/summary.json");
  ENGRAM_CHECK(sf.good(), Error::Kind::Io, "cannot write ", dir, "/summary.json");
  sf << summary.dump(2) << "\n";
}

}  // namespace

ProtocolResult run_protocol(const BackboneWeights<float>& bb, const AdapterParams<float>* adapter,
                            const std::vector<Dialogue>& corpus, const Vocab& vocab,
                            const ProtocolOptions& opts) {
  ENGRAM_CHECK(!corpus.empty(), Error::Kind::Config, "empty corpus");
  ProtocolResult res;
  res.corpus_hash = corpus_hash(corpus);

  int n_sessions = 0;
  for (const auto& d : corpus)
    n_sessions = std::max(n_sessions, static_cast<int>(d.sessions.size()));

  for (size_t di = 0; di < corpus.size(); ++di) {
    const auto& d = corpus[di];
    const int total = d.total_turns();
    std::vector<std::vector<const QAItem*>> by_ask(static_cast<size_t>(total));
    for (const auto& q : d.qa) {
      ENGRAM_CHECK(q.ask_after_turn >= 0 && q.ask_after_turn < total, Error::Kind::Index,
                   "QA ask point ", q.ask_after_turn, " outside the dialogue's ", total, " turns");
      by_ask[static_cast<size_t>(q.ask_after_turn)].push_back(&q);
    }

    ConversationHandle handle;
    if (adapter) handle = open_conversation(bb, *adapter, vocab);

    for (int g = 0; g < total; ++g) {
      if (adapter) run_turn(handle, d.turn_at(g), 0);
      for (const QAItem* q : by_ask[static_cast<size_t>(g)]) {
        TurnResult base = baseline_probe(bb, vocab, q->question, opts.max_answer_tokens);
        TurnResult mem = base, abl = base;
        if (adapter) {
          mem = probe(handle, q->question, opts.max_answer_tokens);
          auto ablated = ablate_memory(handle);
          abl = probe(ablated, q->question, opts.max_answer_tokens);
        }
        ENGRAM_CHECK(mem.input_hash == abl.input_hash && mem.input_hash == base.input_hash,
                     Error::Kind::Contract, "equal-input violation on question '", q->question,
                     "'");
        QuestionResult r;
        r.dialogue = static_cast<int>(di);
        r.session = q->session;
        r.lag = evidence_lag(d, *q);
        r.prediction = answer_text(vocab, mem.generated);
        r.gold = q->answer;
        r.f1_mem = token_f1(r.prediction, q->answer);
        r.f1_ablated = token_f1(answer_text(vocab, abl.generated), q->answer);
        r.f1_baseline = token_f1(answer_text(vocab, base.generated), q->answer);
        r.retained = retained_score(r.f1_mem, r.f1_ablated);
        r.input_hash = mem.input_hash;
        res.questions.push_back(std::move(r));
      }
    }
  }

  res.curve = bucket_and_smooth(res.questions);
  auto [k, dk] = knowledge_curve(res.questions, n_sessions, &res.curve.carried_sessions);
  res.curve.k_series = std::move(k);
  res.curve.delta_k = dk;
  res.delta_k = dk;

  float min_ret = std::numeric_limits<float>::infinity();
  for (size_t b = 0; b < kNumLagBuckets; ++b)
    if (res.curve.counts[b] > 0) min_ret = std::min(min_ret, res.curve.smoothed[b]);
  res.min_retained_pct = 100.0f * min_ret;

  if (!opts.out_dir.empty()) write_outputs(opts.out_dir, opts, res, n_sessions);
  return res;
}

}  // namespace engram
