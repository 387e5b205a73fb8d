#pragma once
// Observation, action, and prompt tokenization: patch embedding with learned
// positions, TokenLearner soft token compression, uniform 256-bin action
// discretization, and a frozen-trunk prompt encoder with a learnable linear
// projection on top. Parameter structs expose visit() so optimizers,
// checkpoints, and freeze partitions can enumerate (name, tensor) pairs.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dualmind/image.hpp"
#include "dualmind/ops.hpp"
#include "dualmind/rng.hpp"

namespace dm {

// Token-id constants shared by the whole pipeline: 256 action bins plus the
// two sentinel embeddings.
inline constexpr int kActionBins = 256;
inline constexpr int kMaskTokenId = 256;
inline constexpr int kPadTokenId = 257;
inline constexpr int kActionVocab = 258;

// ------------------------------------------------------- init factories ---
template <class S>
tensor<S> gaussian_tensor(const shape_t& shape, S stddev, rng& r, bool requires_grad = true) {
  std::vector<S> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = S(r.gaussian()) * stddev;
  return tensor<S>::from(shape, std::move(v), requires_grad);
}

template <class S>
tensor<S> zero_tensor(const shape_t& shape, bool requires_grad = true) {
  tensor<S> t = tensor<S>::zeros(shape);
  t.set_requires_grad(requires_grad);
  return t;
}

template <class S>
tensor<S> const_tensor(const shape_t& shape, S value, bool requires_grad = true) {
  std::vector<S> v(static_cast<std::size_t>(shape_numel(shape)), value);
  return tensor<S>::from(shape, std::move(v), requires_grad);
}

// ---------------------------------------------------------- patch embed ---
struct patch_config {
  int image_size = 64;
  int patch_size = 16;
  int channels = 3;
  int embed_dim = 128;

  int side() const { return image_size / patch_size; }
  int tokens() const { return side() * side(); }  // S
  int patch_dim() const { return patch_size * patch_size * channels; }
  void validate() const {
    check(patch_size > 0 && image_size > 0 && channels > 0 && embed_dim > 0,
          "patch_config: all fields must be positive");
    check(image_size % patch_size == 0, "patch_config: image_size " + std::to_string(image_size) +
                                            " not divisible by patch_size " +
                                            std::to_string(patch_size));
  }
};

template <class S>
struct patch_embed_params {
  tensor<S> w;    // [patch_dim, d]
  tensor<S> b;    // [d]
  tensor<S> pos;  // [S, d] learned per-patch position embedding

  static patch_embed_params init(const patch_config& cfg, rng& r) {
    cfg.validate();
    patch_embed_params p;
    p.w = gaussian_tensor<S>({cfg.patch_dim(), cfg.embed_dim}, S(0.02), r);
    p.b = zero_tensor<S>({cfg.embed_dim});
    p.pos = gaussian_tensor<S>({cfg.tokens(), cfg.embed_dim}, S(0.01), r);
    return p;
  }
  template <class F>
  void visit(const std::string& prefix, F&& fn) {
    fn(prefix + ".w", w);
    fn(prefix + ".b", b);
    fn(prefix + ".pos", pos);
  }
};

// Flattens an image into its row-major patch matrix [S, patch_dim] with
// pixel values scaled to [0,1]. Pure data: never part of the gradient graph.
template <class S>
tensor<S> patches_from_image(const image& img, const patch_config& cfg) {
  cfg.validate();
  check(int(img.h) == cfg.image_size && int(img.w) == cfg.image_size &&
            int(img.c) == cfg.channels,
        "patches_from_image: image " + std::to_string(img.h) + "x" + std::to_string(img.w) + "x" +
            std::to_string(img.c) + " does not match config " + std::to_string(cfg.image_size) +
            "x" + std::to_string(cfg.image_size) + "x" + std::to_string(cfg.channels));
  const int side = cfg.side(), ps = cfg.patch_size;
  std::vector<S> v(static_cast<std::size_t>(cfg.tokens()) * cfg.patch_dim());
  std::size_t at = 0;
  for (int py = 0; py < side; ++py)
    for (int px = 0; px < side; ++px)
      for (int y = 0; y < ps; ++y)
        for (int x = 0; x < ps; ++x)
          for (int c = 0; c < cfg.channels; ++c)
            v[at++] = S(img.at(py * ps + y, px * ps + x, c)) / S(255);
  return tensor<S>::from({cfg.tokens(), cfg.patch_dim()}, std::move(v), false);
}

// patches [N*S, patch_dim] for N images stacked row-wise -> tokens [N*S, d].
// The learned position embedding is added per patch index via a repeated
// gather, so position gradients accumulate across all images in the stack.
template <class S>
tensor<S> patch_embed(const tensor<S>& patches, const patch_embed_params<S>& p,
                      const patch_config& cfg) {
  check(patches.rank() == 2 && patches.dim(1) == cfg.patch_dim(),
        "patch_embed: patches shape " + shape_str(patches.shape()) + " wants [*, " +
            std::to_string(cfg.patch_dim()) + "]");
  const int s = cfg.tokens();
  check(patches.dim(0) % s == 0, "patch_embed: row count " + std::to_string(patches.dim(0)) +
                                     " not a multiple of token count " + std::to_string(s));
  const int n = patches.dim(0) / s;
  std::vector<int> ids(static_cast<std::size_t>(n) * s);
  for (int i = 0; i < n * s; ++i) ids[std::size_t(i)] = i % s;
  return add(add_rowwise(matmul(patches, p.w), p.b), gather_rows(p.pos, ids));
}

// ---------------------------------------------------------- TokenLearner ---
struct token_learner_config {
  int in_tokens = 16;   // S
  int out_tokens = 4;   // K
  int embed_dim = 128;  // d
  int hidden_dim = 64;
  void validate() const {
    check(out_tokens >= 1 && out_tokens <= in_tokens,
          "token_learner_config: need 1 <= K <= S, got K=" + std::to_string(out_tokens) +
              " S=" + std::to_string(in_tokens));
  }
};

template <class S>
struct token_learner_params {
  tensor<S> w1;  // [d, hidden]
  tensor<S> b1;  // [hidden]
  tensor<S> w2;  // [hidden, K]
  tensor<S> b2;  // [K]

  static token_learner_params init(const token_learner_config& cfg, rng& r) {
    cfg.validate();
    token_learner_params p;
    p.w1 = gaussian_tensor<S>({cfg.embed_dim, cfg.hidden_dim}, S(0.02), r);
    p.b1 = zero_tensor<S>({cfg.hidden_dim});
    p.w2 = gaussian_tensor<S>({cfg.hidden_dim, cfg.out_tokens}, S(0.02), r);
    p.b2 = zero_tensor<S>({cfg.out_tokens});
    return p;
  }
  template <class F>
  void visit(const std::string& prefix, F&& fn) {
    fn(prefix + ".w1", w1);
    fn(prefix + ".b1", b1);
    fn(prefix + ".w2", w2);
    fn(prefix + ".b2", b2);
  }
};

template <class S>
struct token_learner_out {
  tensor<S> z;        // [N*K, d] compressed tokens, N images stacked
  tensor<S> weights;  // [N*K, S] detached selection weights, rows sum to 1
};

// x [N*S, d] -> K soft-selected tokens per image. Each output token is a
// convex combination of the S input tokens: a two-layer GELU MLP scores the
// map [S, K], softmax normalizes over the S spatial axis, and z = weights^T x.
template <class S>
token_learner_out<S> token_learner(const tensor<S>& x, const token_learner_params<S>& p,
                                   const token_learner_config& cfg) {
  cfg.validate();
  const int s = cfg.in_tokens, k = cfg.out_tokens, d = cfg.embed_dim;
  check(x.rank() == 2 && x.dim(1) == d && x.dim(0) % s == 0,
        "token_learner: input shape " + shape_str(x.shape()) + " wants [N*" + std::to_string(s) +
            ", " + std::to_string(d) + "]");
  const int n = x.dim(0) / s;
  auto scores = add_rowwise(matmul(gelu(add_rowwise(matmul(x, p.w1), p.b1)), p.w2), p.b2);
  auto probs = softmax(reshape(scores, {n, s, k}), 1);  // normalize over the S axis
  auto z3 = bmm(probs, reshape(x, {n, s, d}), /*ta=*/true, /*tb=*/false);  // [n, k, d]
  token_learner_out<S> out;
  out.z = reshape(z3, {n * k, d});
  // Detached [n*k, s] view of the selection weights for diagnostics/export.
  std::vector<S> w(static_cast<std::size_t>(n) * k * s);
  const auto& pv = probs.value();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j)
      for (int t = 0; t < s; ++t)
        w[std::size_t((i * k + j) * s + t)] = pv[std::size_t((i * s + t) * k + j)];
  out.weights = tensor<S>::from({n * k, s}, std::move(w), false);
  return out;
}

// ------------------------------------------------------ action tokenizer ---
struct action_spec {
  std::string domain;
  bool discrete = true;
  int cardinality = 0;            // discrete only
  std::vector<double> lo, hi;     // continuous, per dimension
  int bins = kActionBins;

  int tokens_per_step() const { return discrete ? 1 : int(lo.size()); }
  void validate() const {
    check(bins == kActionBins, "action_spec: bins must be 256");
    if (discrete) {
      check(cardinality >= 1 && cardinality <= kActionBins,
            "action_spec: discrete cardinality must be in [1,256], got " +
                std::to_string(cardinality));
    } else {
      check(!lo.empty() && lo.size() == hi.size(),
            "action_spec: continuous needs matching lo/hi ranges");
      for (std::size_t i = 0; i < lo.size(); ++i)
        check(lo[i] < hi[i], "action_spec: need lo < hi in dimension " + std::to_string(i));
    }
  }
};

inline std::vector<int> tokenize_action(const std::vector<double>& a, const action_spec& spec) {
  spec.validate();
  if (spec.discrete) {
    check(a.size() == 1, "tokenize_action: discrete action wants a single value");
    const double raw = a[0];
    check(std::isfinite(raw), "tokenize_action: non-finite discrete id");
    const int id = int(raw);
    check(double(id) == raw && id >= 0 && id < spec.cardinality,
          "tokenize_action: discrete id " + std::to_string(raw) + " outside cardinality " +
              std::to_string(spec.cardinality));
    return {id};
  }
  check(a.size() == spec.lo.size(), "tokenize_action: dimension mismatch, got " +
                                        std::to_string(a.size()) + " want " +
                                        std::to_string(spec.lo.size()));
  std::vector<int> ids(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    check(std::isfinite(a[i]), "tokenize_action: non-finite value in dimension " +
                                   std::to_string(i));
    const double lo = spec.lo[i], hi = spec.hi[i];
    const double c = std::min(hi, std::max(lo, a[i]));
    ids[i] = std::min(255, int(std::floor((c - lo) / (hi - lo) * 256.0)));
  }
  return ids;
}

inline std::vector<double> detokenize_action(const std::vector<int>& ids,
                                             const action_spec& spec) {
  spec.validate();
  for (int id : ids)
    check(id >= 0 && id < kActionBins,
          "detokenize_action: id " + std::to_string(id) + " outside [0,256)");
  if (spec.discrete) {
    check(ids.size() == 1, "detokenize_action: discrete action wants a single id");
    check(ids[0] < spec.cardinality, "detokenize_action: id " + std::to_string(ids[0]) +
                                         " outside cardinality " +
                                         std::to_string(spec.cardinality));
    return {double(ids[0])};
  }
  check(ids.size() == spec.lo.size(), "detokenize_action: dimension mismatch");
  std::vector<double> a(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i)
    a[i] = spec.lo[i] + (double(ids[i]) + 0.5) * (spec.hi[i] - spec.lo[i]) / 256.0;
  return a;
}

// -------------------------------------------------------------- prompts ---
enum class prompt_kind : std::uint8_t { goal_image = 0, object_id = 1, language = 2 };

struct task_prompt {
  prompt_kind kind = prompt_kind::object_id;
  image img;             // goal_image payload
  int object = -1;       // object_id payload
  std::string text;      // language payload (whitespace-separated template words)
};

// Line-oriented `id<TAB>surface-form` vocabulary, ids contiguous from 0.
struct prompt_vocab {
  std::vector<std::string> words;
  std::map<std::string, int> index;

  static prompt_vocab from_words(std::vector<std::string> ws) {
    prompt_vocab v;
    v.words = std::move(ws);
    for (std::size_t i = 0; i < v.words.size(); ++i) {
      check(!v.words[i].empty(), "prompt_vocab: empty surface form at id " + std::to_string(i));
      check(!v.index.count(v.words[i]), "prompt_vocab: duplicate word '" + v.words[i] + "'");
      v.index[v.words[i]] = int(i);
    }
    return v;
  }
  static prompt_vocab load(const std::string& path) {
    std::ifstream in(path);
    check(bool(in), "prompt_vocab: cannot open " + path);
    std::map<int, std::string> by_id;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      auto tab = line.find('\t');
      check(tab != std::string::npos,
            "prompt_vocab: " + path + ":" + std::to_string(lineno) + ": missing tab");
      int id = -1;
      try {
        id = std::stoi(line.substr(0, tab));
      } catch (const std::exception&) {
        check(false, "prompt_vocab: " + path + ":" + std::to_string(lineno) + ": bad id");
      }
      std::string word = line.substr(tab + 1);
      check(!by_id.count(id), "prompt_vocab: duplicate id " + std::to_string(id));
      by_id[id] = word;
    }
    std::vector<std::string> ws(by_id.size());
    for (auto& [id, w] : by_id) {
      check(id >= 0 && id < int(by_id.size()),
            "prompt_vocab: ids must be contiguous from 0, saw " + std::to_string(id));
      ws[std::size_t(id)] = w;
    }
    return from_words(std::move(ws));
  }
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    check(bool(out), "prompt_vocab: cannot write " + path);
    for (std::size_t i = 0; i < words.size(); ++i) out << i << '\t' << words[i] << '\n';
  }
  std::string listing() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < words.size(); ++i) os << (i ? " " : "") << i << ":" << words[i];
    return os.str();
  }
  int lookup(const std::string& word) const {
    auto it = index.find(word);
    check(it != index.end(),
          "prompt_vocab: unknown word '" + word + "'; known vocabulary: " + listing());
    return it->second;
  }
  int size() const { return int(words.size()); }
};

// Frozen deterministic trunk (seeded random patch path + embedding table)
// feeding a learnable d->d linear projection. Only the projection trains.
template <class S>
struct prompt_encoder {
  patch_config pcfg;
  prompt_vocab vocab;
  std::uint64_t trunk_seed = 0;
  patch_embed_params<S> trunk_patch;  // requires_grad=false
  tensor<S> trunk_vocab;              // [V, d], requires_grad=false
  tensor<S> proj_w;                   // [d, d]
  tensor<S> proj_b;                   // [d]

  static prompt_encoder init(const patch_config& pcfg, const prompt_vocab& vocab,
                             std::uint64_t trunk_seed) {
    check(vocab.size() >= 1, "prompt_encoder: vocabulary must not be empty");
    prompt_encoder e;
    e.pcfg = pcfg;
    e.vocab = vocab;
    e.trunk_seed = trunk_seed;
    seed_splitter split(trunk_seed);
    rng rp = split.stream("prompt.trunk.patch", 0);
    e.trunk_patch = patch_embed_params<S>::init(pcfg, rp);
    e.trunk_patch.w.set_requires_grad(false);
    e.trunk_patch.b.set_requires_grad(false);
    e.trunk_patch.pos.set_requires_grad(false);
    rng rv = split.stream("prompt.trunk.vocab", 0);
    e.trunk_vocab =
        gaussian_tensor<S>({vocab.size(), pcfg.embed_dim}, S(0.02), rv, /*requires_grad=*/false);
    rng rj = split.stream("prompt.proj", 0);
    e.proj_w = gaussian_tensor<S>({pcfg.embed_dim, pcfg.embed_dim}, S(0.02), rj);
    e.proj_b = zero_tensor<S>({pcfg.embed_dim});
    return e;
  }

  template <class F>
  void visit_trainable(const std::string& prefix, F&& fn) {
    fn(prefix + ".proj.w", proj_w);
    fn(prefix + ".proj.b", proj_b);
  }
  template <class F>
  void visit_frozen(const std::string& prefix, F&& fn) {
    fn(prefix + ".trunk.patch.w", trunk_patch.w);
    fn(prefix + ".trunk.patch.b", trunk_patch.b);
    fn(prefix + ".trunk.patch.pos", trunk_patch.pos);
    fn(prefix + ".trunk.vocab", trunk_vocab);
  }

  // -> [P, d] prompt tokens; gradient reaches only proj_w / proj_b.
  tensor<S> encode(const task_prompt& p) const {
    tensor<S> trunk_out;  // [P, d]
    switch (p.kind) {
      case prompt_kind::goal_image: {
        auto patches = patches_from_image<S>(p.img, pcfg);
        auto toks = patch_embed(patches, trunk_patch, pcfg);       // [S, d], no grad
        trunk_out = reshape(mean_axis(toks, 0), {1, pcfg.embed_dim});
        break;
      }
      case prompt_kind::object_id: {
        check(p.object >= 0 && p.object < vocab.size(),
              "prompt_encoder: unknown object id " + std::to_string(p.object) +
                  "; known vocabulary: " + vocab.listing());
        trunk_out = gather_rows(trunk_vocab, std::vector<int>{p.object});
        break;
      }
      case prompt_kind::language: {
        std::istringstream is(p.text);
        std::vector<int> ids;
        std::string word;
        while (is >> word) ids.push_back(vocab.lookup(word));
        check(!ids.empty(), "prompt_encoder: empty language prompt");
        trunk_out = gather_rows(trunk_vocab, ids);
        break;
      }
    }
    return add_rowwise(matmul(trunk_out, proj_w), proj_b);
  }
};

}  // namespace dm
