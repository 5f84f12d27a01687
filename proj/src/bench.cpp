#include "engram/bench.hpp"

#include <algorithm>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

namespace engram {

using nlohmann::json;

int Dialogue::total_turns() const {
  int n = 0;
  for (const auto& s : sessions) n += static_cast<int>(s.turns.size());
  return n;
}

int Dialogue::global_index(int session, int turn) const {
  ENGRAM_CHECK(session >= 0 && session < static_cast<int>(sessions.size()), Error::Kind::Index,
               "session ", session, " out of range (", sessions.size(), " sessions)");
  const auto& s = sessions[static_cast<size_t>(session)];
  ENGRAM_CHECK(turn >= 0 && turn < static_cast<int>(s.turns.size()), Error::Kind::Index,
               "turn ", turn, " out of range in session ", session);
  int base = 0;
  for (int i = 0; i < session; ++i) base += static_cast<int>(sessions[size_t(i)].turns.size());
  return base + turn;
}

int Dialogue::session_of_global(int global) const {
  ENGRAM_CHECK(global >= 0 && global < total_turns(), Error::Kind::Index, "global turn ",
               global, " out of range (", total_turns(), " turns)");
  int acc = 0;
  for (size_t i = 0; i < sessions.size(); ++i) {
    acc += static_cast<int>(sessions[i].turns.size());
    if (global < acc) return static_cast<int>(i);
  }
  return static_cast<int>(sessions.size()) - 1;
}

const Turn& Dialogue::turn_at(int global) const {
  int s = session_of_global(global);
  int base = 0;
  for (int i = 0; i < s; ++i) base += static_cast<int>(sessions[size_t(i)].turns.size());
  return sessions[static_cast<size_t>(s)].turns[static_cast<size_t>(global - base)];
}

int lag_bucket(int lag) {
  ENGRAM_CHECK(lag >= 0, Error::Kind::Value, "negative evidence lag ", lag);
  for (int b = 0; b < kNumLagBuckets; ++b)
    if (lag < kLagBucketEdges[static_cast<size_t>(b) + 1]) return b;
  return kNumLagBuckets - 1;
}

std::string lag_bucket_label(int bucket) {
  ENGRAM_CHECK(bucket >= 0 && bucket < kNumLagBuckets, Error::Kind::Index, "lag bucket ",
               bucket, " out of range");
  if (bucket == kNumLagBuckets - 1)
    return "[" + std::to_string(kLagBucketEdges[static_cast<size_t>(bucket)]) + ",inf)";
  return "[" + std::to_string(kLagBucketEdges[static_cast<size_t>(bucket)]) + "," +
         std::to_string(kLagBucketEdges[static_cast<size_t>(bucket) + 1]) + ")";
}

void BenchConfig::validate() const {
  ENGRAM_CHECK(n_dialogues > 0 && n_sessions > 0 && turns_per_session > 0, Error::Kind::Config,
               "dialogue, session, and turn counts must be positive");
  ENGRAM_CHECK(lag_profile == "mixed" || lag_profile == "single", Error::Kind::Config,
               "lag_profile must be 'mixed' or 'single', got '", lag_profile, "'");
  ENGRAM_CHECK(distractor_rate >= 0.0 && distractor_rate <= 1.0, Error::Kind::Config,
               "distractor_rate must lie in [0,1]");
  ENGRAM_CHECK(overwrite_rate >= 0.0 && overwrite_rate <= 1.0, Error::Kind::Config,
               "overwrite_rate must lie in [0,1]");
  ENGRAM_CHECK(qa_per_bucket > 0, Error::Kind::Config, "qa_per_bucket must be positive");
  const int max_lag = n_sessions * turns_per_session - 1;
  for (int b = 0; b < kNumLagBuckets; ++b)
    ENGRAM_CHECK(kLagBucketEdges[static_cast<size_t>(b)] <= max_lag, Error::Kind::Config,
                 "lag bucket ", lag_bucket_label(b), " is unreachable: dialogues of ",
                 max_lag + 1, " turns reach at most lag ", max_lag);
}

bool benchmark_owns_triple(const std::string& entity, const std::string& attribute,
                           const std::string& value) {
  return (fnv1a64("t|" + entity + "|" + attribute + "|" + value) & 1ull) == 1ull;
}

namespace {

struct PlannedFact {
  int entity = -1, attribute = -1, value = -1;
};

std::string fact_text(const Vocab& v, const PlannedFact& f) {
  return v.entity(f.entity) + " " + v.attribute(f.attribute) + " is " + v.value(f.value);
}

// picks a value on the requested side of the corpus split
int sample_value(const Vocab& vocab, Rng& rng, int entity, int attribute, bool benchmark_side) {
  const int nv = vocab.config().n_values;
  const std::string e = vocab.entity(entity), a = vocab.attribute(attribute);
  for (int tries = 0; tries < 1000; ++tries) {
    int v = static_cast<int>(rng.uniform_int(0, nv - 1));
    if (benchmark_owns_triple(e, a, vocab.value(v)) == benchmark_side) return v;
  }
  fail(Error::Kind::Config, "could not sample a ", benchmark_side ? "benchmark" : "pretraining",
       "-side value for ", e, " ", a, "; value pool too small");
}

Dialogue generate_dialogue(const BenchConfig& cfg, const Vocab& vocab, uint64_t seed) {
  Rng rng(seed);
  const int tps = cfg.turns_per_session;
  const int n = cfg.n_sessions * tps;
  std::vector<PlannedFact> slots(static_cast<size_t>(n));  // entity < 0 means free
  std::set<std::pair<int, int>> used_pairs;
  const int total_pairs = vocab.config().n_entities * vocab.config().n_attributes;

  auto fresh_pair = [&](int* e, int* a) {
    if (static_cast<int>(used_pairs.size()) >= total_pairs) return false;
    for (int tries = 0; tries < 2000; ++tries) {
      int ce = static_cast<int>(rng.uniform_int(0, vocab.config().n_entities - 1));
      int ca = static_cast<int>(rng.uniform_int(0, vocab.config().n_attributes - 1));
      if (used_pairs.emplace(ce, ca).second) {
        *e = ce;
        *a = ca;
        return true;
      }
    }
    return false;
  };

  // finds a free slot at or after `from`, not past `limit`; -1 when none
  auto free_slot_from = [&](int from, int limit) {
    for (int i = std::max(from, 0); i <= limit; ++i)
      if (slots[static_cast<size_t>(i)].entity < 0) return i;
    return -1;
  };

  Dialogue dlg;
  dlg.seed = seed;

  for (int bucket = 0; bucket < kNumLagBuckets; ++bucket) {
    const int lag_lo = kLagBucketEdges[static_cast<size_t>(bucket)];
    const int lag_hi = std::min(kLagBucketEdges[static_cast<size_t>(bucket) + 1] - 1, n - 1);
    for (int q = 0; q < cfg.qa_per_bucket; ++q) {
      int lag = 0, ask = 0, first = 0;
      bool placed = false;
      for (int tries = 0; tries < 500 && !placed; ++tries) {
        lag = static_cast<int>(rng.uniform_int(lag_lo, lag_hi));
        ask = static_cast<int>(rng.uniform_int(lag, n - 1));
        first = ask - lag;
        placed = slots[static_cast<size_t>(first)].entity < 0;
      }
      ENGRAM_CHECK(placed, Error::Kind::Config, "could not place a question in lag bucket ",
                   lag_bucket_label(bucket), "; dialogue too crowded");

      int e = 0, a = 0;
      PlannedFact fact;
      if (fresh_pair(&e, &a)) {
        fact = {e, a, sample_value(vocab, rng, e, a, true)};
      } else {
        // tiny configs can exhaust the pair pool: restate an already used fact
        bool found = false;
        for (int i = 0; i < n && !found; ++i)
          if (slots[static_cast<size_t>(i)].entity >= 0) {
            fact = slots[static_cast<size_t>(i)];
            found = true;
          }
        if (!found) fact = {0, 0, sample_value(vocab, rng, 0, 0, true)};
      }

      const bool overwrite = cfg.lag_profile == "mixed" && rng.bernoulli(cfg.overwrite_rate);
      if (overwrite && first > 0) {
        // stale statements of the same pair before the evidence chain begins
        int old_v = fact.value;
        for (int t = 0; t < 50 && old_v == fact.value; ++t)
          old_v = sample_value(vocab, rng, fact.entity, fact.attribute, true);
        if (old_v != fact.value) {
          int n_old = static_cast<int>(rng.uniform_int(1, 2));
          for (int i = 0; i < n_old; ++i) {
            int pos = free_slot_from(static_cast<int>(rng.uniform_int(0, first - 1)), first - 1);
            if (pos >= 0) slots[static_cast<size_t>(pos)] = {fact.entity, fact.attribute, old_v};
          }
        }
      }

      std::vector<int> positions{first};
      slots[static_cast<size_t>(first)] = fact;
      if (cfg.lag_profile == "mixed" && lag >= kLagBucketEdges[1]) {
        // keep long-range facts alive with periodic restatements, the last
        // of them close to the ask point
        int c = first;
        while (ask - c > 28) {
          int next = c + static_cast<int>(rng.uniform_int(16, 40));
          next = std::min(next, ask);
          int pos = free_slot_from(next, ask);
          if (pos <= c) break;
          slots[static_cast<size_t>(pos)] = fact;
          positions.push_back(pos);
          c = pos;
        }
      }

      QAItem qa;
      qa.question = "what is " + vocab.entity(fact.entity) + " " + vocab.attribute(fact.attribute);
      qa.answer = vocab.value(fact.value);
      qa.ask_after_turn = ask;
      qa.session = ask / tps;
      for (int pos : positions) qa.evidence.emplace_back(pos / tps, pos % tps);
      std::sort(qa.evidence.begin(), qa.evidence.end());
      dlg.qa.push_back(std::move(qa));
    }
  }

  // remaining slots: filler chatter or background facts about untouched pairs
  for (int i = 0; i < n; ++i) {
    if (slots[static_cast<size_t>(i)].entity >= 0) continue;
    int e = 0, a = 0;
    if (!rng.bernoulli(cfg.distractor_rate) && fresh_pair(&e, &a))
      slots[static_cast<size_t>(i)] = {e, a, sample_value(vocab, rng, e, a, true)};
  }

  dlg.sessions.resize(static_cast<size_t>(cfg.n_sessions));
  for (int i = 0; i < n; ++i) {
    Turn turn;
    turn.speaker = vocab.speaker(i % 2);
    if (slots[static_cast<size_t>(i)].entity >= 0) {
      turn.text = fact_text(vocab, slots[static_cast<size_t>(i)]);
    } else {
      int words = static_cast<int>(rng.uniform_int(3, 7));
      std::string text;
      for (int wjj = 0; wjj < words; ++wjj) {
        if (!text.empty()) text += ' ';
        text += vocab.filler(static_cast<int>(rng.uniform_int(0, vocab.n_filler() - 1)));
      }
      turn.text = text;
    }
    dlg.sessions[static_cast<size_t>(i / tps)].turns.push_back(std::move(turn));
  }

  std::sort(dlg.qa.begin(), dlg.qa.end(), [](const QAItem& x, const QAItem& y) {
    return x.ask_after_turn < y.ask_after_turn;
  });
  return dlg;
}

}  // namespace

std::vector<Dialogue> generate_benchmark(const BenchConfig& cfg, const Vocab& vocab) {
  cfg.validate();
  ENGRAM_CHECK(vocab.n_filler() > 0, Error::Kind::Config,
               "benchmark generation needs filler words in the vocabulary");
  std::vector<Dialogue> corpus;
  corpus.reserve(static_cast<size_t>(cfg.n_dialogues));
  for (int d = 0; d < cfg.n_dialogues; ++d)
    corpus.push_back(generate_dialogue(cfg, vocab, cfg.seed + 0x9e3779b97f4a7c15ull * (d + 1)));
  validate_corpus(corpus, cfg.n_dialogues);
  return corpus;
}

void validate_corpus(const std::vector<Dialogue>& corpus, int min_per_bucket) {
  ENGRAM_CHECK(!corpus.empty(), Error::Kind::Validation, "corpus holds no dialogues");
  std::array<int, kNumLagBuckets> histogram{};
  for (size_t d = 0; d < corpus.size(); ++d) {
    const Dialogue& dlg = corpus[d];
    ENGRAM_CHECK(!dlg.sessions.empty(), Error::Kind::Validation, "dialogue ", d,
                 " has no sessions");
    for (size_t q = 0; q < dlg.qa.size(); ++q) {
      const QAItem& qa = dlg.qa[q];
      ENGRAM_CHECK(!qa.evidence.empty(), Error::Kind::Validation, "dialogue ", d, " question ",
                   q, " has no evidence turns");
      ENGRAM_CHECK(!qa.answer.empty(), Error::Kind::Validation, "dialogue ", d, " question ", q,
                   " has an empty answer");
      int min_global = std::numeric_limits<int>::max();
      for (auto [s, t] : qa.evidence) {
        const int g = dlg.global_index(s, t);  // raises on bad indices
        min_global = std::min(min_global, g);
        const Turn& turn = dlg.turn_at(g);
        const std::string suffix = " is " + qa.answer;
        ENGRAM_CHECK(turn.text.size() > suffix.size() &&
                         turn.text.compare(turn.text.size() - suffix.size(), suffix.size(),
                                           suffix) == 0,
                     Error::Kind::Validation, "dialogue ", d, " question ", q,
                     " evidence turn does not state the gold answer: '", turn.text, "'");
      }
      ENGRAM_CHECK(qa.ask_after_turn < dlg.total_turns(), Error::Kind::Validation, "dialogue ",
                   d, " question ", q, " asks after turn ", qa.ask_after_turn,
                   " but the dialogue has ", dlg.total_turns(), " turns");
      ENGRAM_CHECK(qa.ask_after_turn >= min_global, Error::Kind::Validation, "dialogue ", d,
                   " question ", q, " asks before its evidence");
      ENGRAM_CHECK(qa.session == dlg.session_of_global(qa.ask_after_turn),
                   Error::Kind::Validation, "dialogue ", d, " question ", q,
                   " has a session tag that does not match its ask point");
      ++histogram[static_cast<size_t>(lag_bucket(qa.ask_after_turn - min_global))];
    }
  }
  if (min_per_bucket > 0)
    for (int b = 0; b < kNumLagBuckets; ++b)
      ENGRAM_CHECK(histogram[static_cast<size_t>(b)] >= min_per_bucket, Error::Kind::Validation,
                   "lag bucket ", lag_bucket_label(b), " holds ", histogram[size_t(b)],
                   " questions, need at least ", min_per_bucket);
}

std::vector<Dialogue> ingest_corpus(const std::string& path, const Vocab& vocab,
                                    IngestReport* report) {
  std::ifstream f(path);
  ENGRAM_CHECK(f.good(), Error::Kind::Validation, "cannot open corpus file '", path, "'");
  json root;
  try {
    f >> root;
  } catch (const json::exception& e) {
    fail(Error::Kind::Validation, "corpus file '", path, "' is not valid JSON: ", e.what());
  }
  ENGRAM_CHECK(root.is_array(), Error::Kind::Validation,
               "corpus file must hold a top-level list of dialogues");
  IngestReport rep;
  std::vector<Dialogue> corpus;
  for (size_t d = 0; d < root.size(); ++d) {
    const json& jd = root[d];
    ENGRAM_CHECK(jd.is_object(), Error::Kind::Validation, "dialogue ", d, " is not an object");
    ENGRAM_CHECK(jd.contains("schema_version"), Error::Kind::Validation, "dialogue ", d,
                 " lacks the mandatory schema_version field");
    ENGRAM_CHECK(jd["schema_version"].get<int>() == 1, Error::Kind::Validation, "dialogue ", d,
                 " uses schema version ", jd["schema_version"].dump(), ", expected 1");
    ENGRAM_CHECK(jd.contains("sessions") && jd["sessions"].is_array(), Error::Kind::Validation,
                 "dialogue ", d, " lacks a sessions list");
    Dialogue dlg;
    dlg.seed = jd.value("seed", uint64_t(0));
    for (const json& js : jd["sessions"]) {
      ENGRAM_CHECK(js.is_array(), Error::Kind::Validation, "dialogue ", d,
                   " has a session that is not a list of turns");
      Session sess;
      for (const json& jt : js) {
        ENGRAM_CHECK(jt.is_object() && jt.contains("speaker") && jt.contains("text"),
                     Error::Kind::Validation, "dialogue ", d,
                     " has a turn without speaker/text");
        Turn turn{jt["speaker"].get<std::string>(), jt["text"].get<std::string>()};
        vocab.encode(turn.speaker + " " + turn.text, &rep.oov_words);
        sess.turns.push_back(std::move(turn));
        ++rep.turns;
      }
      dlg.sessions.push_back(std::move(sess));
    }
    for (const json& jq : jd.value("qa", json::array())) {
      ENGRAM_CHECK(jq.contains("question") && jq.contains("answer") && jq.contains("evidence") &&
                       jq.contains("ask_after_turn"),
                   Error::Kind::Validation, "dialogue ", d,
                   " has a question lacking question/answer/evidence/ask_after_turn");
      QAItem qa;
      qa.question = jq["question"].get<std::string>();
      qa.answer = jq["answer"].get<std::string>();
      qa.ask_after_turn = jq["ask_after_turn"].get<int>();
      for (const json& je : jq["evidence"]) {
        ENGRAM_CHECK(je.is_array() && je.size() == 2, Error::Kind::Validation, "dialogue ", d,
                     " has an evidence entry that is not a [session, turn] pair");
        qa.evidence.emplace_back(je[0].get<int>(), je[1].get<int>());
      }
      vocab.encode(qa.question + " " + qa.answer, &rep.oov_words);
      qa.session = dlg.session_of_global(qa.ask_after_turn);
      dlg.qa.push_back(std::move(qa));
      ++rep.questions;
    }
    corpus.push_back(std::move(dlg));
    ++rep.dialogues;
  }
  validate_corpus(corpus);
  if (report) *report = rep;
  return corpus;
}

void export_corpus(const std::string& path, const std::vector<Dialogue>& corpus) {
  json root = json::array();
  for (const Dialogue& dlg : corpus) {
    json jd;
    jd["schema_version"] = 1;
    jd["seed"] = dlg.seed;
    json sessions = json::array();
    for (const Session& s : dlg.sessions) {
      json js = json::array();
      for (const Turn& t : s.turns) js.push_back({{"speaker", t.speaker}, {"text", t.text}});
      sessions.push_back(std::move(js));
    }
    jd["sessions"] = std::move(sessions);
    json qa = json::array();
    for (const QAItem& q : dlg.qa) {
      json je = json::array();
      for (auto [s, t] : q.evidence) je.push_back({s, t});
      qa.push_back({{"question", q.question},
                    {"answer", q.answer},
                    {"evidence", je},
                    {"ask_after_turn", q.ask_after_turn}});
    }
    jd["qa"] = std::move(qa);
    root.push_back(std::move(jd));
  }
  std::ofstream f(path);
  ENGRAM_CHECK(f.good(), Error::Kind::Io, "cannot open '", path, "' for writing");
  f << root.dump(1) << "\n";
  ENGRAM_CHECK(f.good(), Error::Kind::Io, "write to '", path, "' failed");
}

std::vector<int> make_pretrain_stream(const Vocab& vocab, const PretrainStreamConfig& cfg) {
  ENGRAM_CHECK(cfg.n_blocks > 0, Error::Kind::Config, "n_blocks must be positive");
  ENGRAM_CHECK(vocab.n_filler() > 0, Error::Kind::Config,
               "pretraining stream needs filler words in the vocabulary");
  Rng rng(cfg.seed);
  std::ostringstream text;
  for (int block = 0; block < cfg.n_blocks; ++block) {
    if (rng.bernoulli(cfg.filler_block_rate)) {
      int sentences = static_cast<int>(rng.uniform_int(1, 2));
      for (int s = 0; s < sentences; ++s) {
        text << vocab.speaker(static_cast<int>(rng.uniform_int(0, 1)));
        int words = static_cast<int>(rng.uniform_int(3, 7));
        for (int wji = 0; wji < words; ++wji)
          text << ' ' << vocab.filler(static_cast<int>(rng.uniform_int(0, vocab.n_filler() - 1)));
        text << ' ';
      }
      continue;
    }
    const int nf = static_cast<int>(rng.uniform_int(2, 5));
    std::vector<PlannedFact> facts;
    for (int i = 0; i < nf; ++i) {
      PlannedFact f;
      f.entity = static_cast<int>(rng.uniform_int(0, vocab.config().n_entities - 1));
      f.attribute = static_cast<int>(rng.uniform_int(0, vocab.config().n_attributes - 1));
      f.value = sample_value(vocab, rng, f.entity, f.attribute, false);
      facts.push_back(f);
      text << vocab.speaker(static_cast<int>(rng.uniform_int(0, 1))) << ' '
           << fact_text(vocab, f) << ' ';
    }
    if (rng.bernoulli(cfg.qa_rate)) {
      const PlannedFact& f = facts[static_cast<size_t>(rng.uniform_int(0, nf - 1))];
      text << "<q> what is " << vocab.entity(f.entity) << ' ' << vocab.attribute(f.attribute)
           << ' ' << vocab.value(f.value) << " <eoa> ";
    }
  }
  int oov = 0;
  std::vector<int> stream = vocab.encode(text.str(), &oov);
  ENGRAM_CHECK(oov == 0, Error::Kind::Contract,
               "pretraining stream produced out-of-vocabulary words");
  return stream;
}

}  // namespace engram
