#include "engram/runtime.hpp"

#include <cmath>
#include <cstdio>

#include "engram/tape.hpp"

namespace engram {

namespace {

void check_handle(const ConversationHandle& h) {
  ENGRAM_CHECK(Tape<float>::active() == nullptr, Error::Kind::Contract,
               "conversation turns must not run under a live tape");
  ENGRAM_CHECK(h.bb != nullptr && h.adapter != nullptr && h.vocab != nullptr,
               Error::Kind::Contract, "conversation handle is not open");
  ENGRAM_CHECK(h.adapter->value_hash() == h.adapter_hash, Error::Kind::Contract,
               "adapter parameters changed under an open conversation");
  ENGRAM_CHECK(h.state.turn == h.start_turn + static_cast<int64_t>(h.transcript.size()),
               Error::Kind::Contract, "memory turn counter out of step with the transcript");
}

// Clips the input from the left so the forward plus `max_new` generated
// tokens fit the context window.
std::vector<int> fit_context(std::vector<int> tokens, int n_ctx, int max_new, bool* truncated) {
  ENGRAM_CHECK(max_new >= 0, Error::Kind::Value, "max_new must be non-negative");
  const int cap = n_ctx - max_new;
  ENGRAM_CHECK(cap >= 1, Error::Kind::Config, "max_new ", max_new,
               " leaves no room for input in a context of ", n_ctx);
  *truncated = static_cast<int>(tokens.size()) > cap;
  if (*truncated) tokens.erase(tokens.begin(), tokens.end() - cap);
  ENGRAM_CHECK(!tokens.empty(), Error::Kind::Value, "empty turn");
  return tokens;
}

TurnResult generate_only(const BackboneWeights<float>& bb, const InjectionHooks<float>* hooks,
                         const std::vector<int>& fed, int max_new) {
  TurnResult res;
  res.input_hash = fnv1a64_values(fed);
  if (max_new == 0) return res;
  auto gen = generate(fed, bb, hooks, max_new, Vocab::kEoa);
  res.generated.assign(gen.tokens.begin() + static_cast<int64_t>(fed.size()), gen.tokens.end());
  res.gen_truncated = gen.truncated;
  return res;
}

TurnResult turn_impl(ConversationHandle& h, const std::string& speaker,
                     const std::string& display_text, std::vector<int> tokens, int max_new) {
  check_handle(h);
  bool truncated = false;
  auto fed = fit_context(std::move(tokens), h.bb->cfg.n_ctx, max_new, &truncated);

  auto hooks = make_read_hooks(h.state, *h.adapter);
  auto [hs, logits] = backbone_forward(fed, *h.bb, &hooks);
  (void)logits;

  TurnResult res = generate_only(*h.bb, &hooks, fed, max_new);
  res.input_truncated = truncated;

  if (h.adapter->method == Method::per_layer_kv)
    write_step(h.state, *h.adapter, hs.final_h, &hs.layer_in);
  else
    write_step(h.state, *h.adapter, hs.final_h);

  TranscriptEntry entry;
  entry.index = static_cast<int>(h.state.turn) - 1;
  entry.speaker = speaker;
  entry.text = display_text;
  entry.memory_norm = memory_norm(h.state);
  entry.input_truncated = truncated;
  h.transcript.push_back(std::move(entry));
  return res;
}

}  // namespace

ConversationHandle open_conversation(const BackboneWeights<float>& bb,
                                     const AdapterParams<float>& adapter, const Vocab& vocab) {
  ENGRAM_CHECK(adapter.method != Method::baseline, Error::Kind::Config,
               "the baseline has no memory state; use the plain backbone");
  ConversationHandle h;
  h.bb = &bb;
  h.adapter = &adapter;
  h.vocab = &vocab;
  h.state = init_memory<float>(adapter.method, adapter.dims, bb.cfg);
  h.adapter_hash = adapter.value_hash();
  h.start_turn = 0;
  return h;
}

TurnResult run_turn(ConversationHandle& h, const Turn& turn, int max_new) {
  auto tokens = h.vocab->encode(turn.speaker + " " + turn.text);
  return turn_impl(h, turn.speaker, turn.text, std::move(tokens), max_new);
}

TurnResult run_turn_tokens(ConversationHandle& h, const std::string& speaker,
                           std::vector<int> tokens, int max_new) {
  std::string text = h.vocab->decode(tokens, /*keep_reserved=*/true);
  return turn_impl(h, speaker, text, std::move(tokens), max_new);
}

TurnResult probe(const ConversationHandle& h, const std::string& question, int max_new) {
  check_handle(h);
  auto tokens = h.vocab->encode("<q> " + question);
  bool truncated = false;
  auto fed = fit_context(std::move(tokens), h.bb->cfg.n_ctx, max_new, &truncated);
  auto hooks = make_read_hooks(h.state, *h.adapter);
  TurnResult res = generate_only(*h.bb, &hooks, fed, max_new);
  res.input_truncated = truncated;
  return res;
}

TurnResult baseline_probe(const BackboneWeights<float>& bb, const Vocab& vocab,
                          const std::string& question, int max_new) {
  ENGRAM_CHECK(Tape<float>::active() == nullptr, Error::Kind::Contract,
               "conversation turns must not run under a live tape");
  auto tokens = vocab.encode("<q> " + question);
  bool truncated = false;
  auto fed = fit_context(std::move(tokens), bb.cfg.n_ctx, max_new, &truncated);
  TurnResult res = generate_only(bb, nullptr, fed, max_new);
  res.input_truncated = truncated;
  return res;
}

std::string answer_text(const Vocab& vocab, const std::vector<int>& generated) {
  return vocab.decode(generated);
}

ConversationHandle ablate_memory(const ConversationHandle& h) {
  ENGRAM_CHECK(h.bb != nullptr && h.adapter != nullptr && h.vocab != nullptr,
               Error::Kind::Contract, "conversation handle is not open");
  return open_conversation(*h.bb, *h.adapter, *h.vocab);
}

void reset_memory(ConversationHandle& h) {
  ENGRAM_CHECK(h.bb != nullptr && h.adapter != nullptr, Error::Kind::Contract,
               "conversation handle is not open");
  h.state = init_memory<float>(h.adapter->method, h.adapter->dims, h.bb->cfg);
  h.start_turn = 0;
  h.transcript.clear();
}

float memory_norm(const MemoryState<float>& state) {
  double acc = 0.0;
  for (const auto& bank : state.banks)
    for (int64_t i = 0; i < bank.numel(); ++i) {
      const double v = bank.ptr()[i];
      acc += v * v;
    }
  return static_cast<float>(std::sqrt(acc));
}

void snapshot(const ConversationHandle& h, const std::string& path, const std::string& capacity) {
  ENGRAM_CHECK(h.adapter != nullptr, Error::Kind::Contract, "conversation handle is not open");
  save_memory(path, h.state, h.adapter->dims, capacity);
}

ConversationHandle restore(const std::string& path, const BackboneWeights<float>& bb,
                           const AdapterParams<float>& adapter, const Vocab& vocab) {
  auto state = load_memory(path, adapter.dims, bb.cfg);
  ENGRAM_CHECK(state.method == adapter.method, Error::Kind::Validation, "snapshot carries method ",
               method_tag(state.method), " but the adapter is ", method_tag(adapter.method));
  ConversationHandle h = open_conversation(bb, adapter, vocab);
  h.start_turn = state.turn;
  h.state = std::move(state);
  return h;
}

std::string export_transcript(const ConversationHandle& h) {
  std::string out;
  for (const auto& e : h.transcript) {
    out += std::to_string(e.index);
    out += '\t';
    out += e.speaker;
    out += '\t';
    out += e.text;
    out += '\t';
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", e.memory_norm);
    out += buf;
    if (e.input_truncated) out += "\ttruncated";
    out += '\n';
  }
  return out;
}

}  // namespace engram
