#include "lmi/tinylm.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "json.hpp"
#include "lmi/util.hpp"

namespace lmi {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configs

void ModelConfig::validate() const {
  if (vocab_size < 1 || context_len < 1) {
    throw std::invalid_argument("vocab_size and context_len must be positive");
  }
  if (arch == Architecture::Affine) return;
  if (d_model < 1 || n_layers < 0 || n_heads < 1 || d_ff < 1) {
    throw std::invalid_argument("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("d_model must be divisible by n_heads");
  }
}

std::size_t ModelConfig::parameter_count() const {
  const std::size_t V = vocab_size, C = context_len, d = d_model, f = d_ff;
  if (arch == Architecture::Affine) return V * V + V;
  const std::size_t per_layer = 2 * d             // ln1
                                + d * 3 * d + 3 * d  // qkv
                                + d * d + d          // attn proj
                                + 2 * d              // ln2
                                + d * f + f          // fc
                                + f * d + d;         // mlp proj
  return V * d + C * d + static_cast<std::size_t>(n_layers) * per_layer + 2 * d +
         (tie_embeddings ? 0 : d * V);
}

std::string ModelConfig::to_json() const {
  json j = {{"arch", arch == Architecture::Affine ? "affine" : "transformer"},
            {"vocab_size", vocab_size},
            {"context_len", context_len},
            {"d_model", d_model},
            {"n_layers", n_layers},
            {"n_heads", n_heads},
            {"d_ff", d_ff},
            {"tie_embeddings", tie_embeddings}};
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  const json j = json::parse(text);
  ModelConfig c;
  const std::string arch = j.value("arch", "transformer");
  if (arch == "affine") {
    c.arch = Architecture::Affine;
  } else if (arch != "transformer") {
    throw std::invalid_argument("unknown architecture: " + arch);
  }
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.context_len = j.value("context_len", c.context_len);
  c.d_model = j.value("d_model", c.d_model);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.tie_embeddings = j.value("tie_embeddings", c.tie_embeddings);
  c.validate();
  return c;
}

std::string ModelConfig::digest() const { return sha256_hex(to_json()); }

ModelConfig config_of(const Checkpoint& ckpt) {
  const std::string text = ckpt.meta_or("config");
  if (text.empty()) throw ModelInputError("checkpoint has no \"config\" metadata");
  return ModelConfig::from_json(text);
}

void TrainConfig::validate() const {
  if (steps < 0) throw std::invalid_argument("steps must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(max_lr > 0.0)) throw std::invalid_argument("max_lr must be > 0");
  if (warmup_steps < 0 || warmup_steps > std::max(steps, 0)) {
    throw std::invalid_argument("warmup_steps must lie in [0, steps]");
  }
  if (weight_decay < 0.0 || beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0 ||
      !(epsilon > 0.0)) {
    throw std::invalid_argument("invalid optimizer hyperparameters");
  }
}

double TrainConfig::lr_at(int step) const {
  if (schedule == Schedule::Constant) return max_lr;
  if (step < warmup_steps) {
    return max_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  const int decay_steps = steps - warmup_steps;
  if (decay_steps <= 0) return max_lr;
  const double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(decay_steps);
  return max_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::string TrainConfig::to_json() const {
  json j = {{"steps", steps},
            {"batch_size", batch_size},
            {"max_lr", max_lr},
            {"weight_decay", weight_decay},
            {"beta1", beta1},
            {"beta2", beta2},
            {"epsilon", epsilon},
            {"warmup_steps", warmup_steps},
            {"schedule", schedule == Schedule::Constant ? "constant" : "cosine-with-warmup"},
            {"seed", seed}};
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  const json j = json::parse(text);
  TrainConfig c;
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_lr = j.value("max_lr", c.max_lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  const std::string sched = j.value("schedule", std::string("cosine-with-warmup"));
  if (sched == "constant") {
    c.schedule = Schedule::Constant;
  } else if (sched != "cosine-with-warmup") {
    throw std::invalid_argument("unknown schedule: " + sched);
  }
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

void GenConfig::validate() const {
  if (!(top_p > 0.0 && top_p <= 1.0)) throw std::invalid_argument("top_p must lie in (0, 1]");
  if (max_new_tokens < 1) throw std::invalid_argument("max_new_tokens must be >= 1");
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
}

TrainingDiverged::TrainingDiverged(int step)
    : std::runtime_error("training diverged (non-finite loss) at step " + std::to_string(step)),
      step_(step) {}

// ---------------------------------------------------------------------------
// Parameter binding

namespace {

constexpr double kLnEps = 1e-5;

template <typename T, bool Mutable>
struct Params {
  using P = std::conditional_t<Mutable, T*, const T*>;
  struct Layer {
    P ln1_w, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_w, ln2_b, fc_w, fc_b, fp_w, fp_b;
  };
  P tok = nullptr;
  P pos = nullptr;
  P lnf_w = nullptr;
  P lnf_b = nullptr;
  P head = nullptr;       // untied transformer head
  P head_bias = nullptr;  // affine model only
  std::vector<Layer> layers;
};

struct TensorSpec {
  std::string name;
  Tensor::Dims dims;
  enum class Init { Normal, Zeros, Ones } init;
};

std::vector<TensorSpec> tensor_specs(const ModelConfig& c) {
  using I = TensorSpec::Init;
  const std::uint64_t V = c.vocab_size, C = c.context_len, d = c.d_model, f = c.d_ff;
  std::vector<TensorSpec> specs;
  if (c.arch == Architecture::Affine) {
    specs.push_back({"embed.tok", {V, V}, I::Normal});
    specs.push_back({"head.bias", {V}, I::Zeros});
    return specs;
  }
  specs.push_back({"embed.tok", {V, d}, I::Normal});
  specs.push_back({"embed.pos", {C, d}, I::Normal});
  for (int i = 0; i < c.n_layers; ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    specs.push_back({p + "ln1.weight", {d}, I::Ones});
    specs.push_back({p + "ln1.bias", {d}, I::Zeros});
    specs.push_back({p + "attn.qkv.weight", {d, 3 * d}, I::Normal});
    specs.push_back({p + "attn.qkv.bias", {3 * d}, I::Zeros});
    specs.push_back({p + "attn.proj.weight", {d, d}, I::Normal});
    specs.push_back({p + "attn.proj.bias", {d}, I::Zeros});
    specs.push_back({p + "ln2.weight", {d}, I::Ones});
    specs.push_back({p + "ln2.bias", {d}, I::Zeros});
    specs.push_back({p + "mlp.fc.weight", {d, f}, I::Normal});
    specs.push_back({p + "mlp.fc.bias", {f}, I::Zeros});
    specs.push_back({p + "mlp.proj.weight", {f, d}, I::Normal});
    specs.push_back({p + "mlp.proj.bias", {d}, I::Zeros});
  }
  specs.push_back({"ln_f.weight", {d}, I::Ones});
  specs.push_back({"ln_f.bias", {d}, I::Zeros});
  if (!c.tie_embeddings) specs.push_back({"head.weight", {d, V}, I::Normal});
  return specs;
}

template <typename T, typename Ckpt>
auto tensor_ptr(Ckpt& ckpt, const std::string& name, const Tensor::Dims& dims) {
  if (!ckpt.contains(name)) throw ModelInputError("checkpoint is missing tensor " + name);
  auto& t = ckpt.at(name);
  if (t.dims() != dims) throw ModelInputError("tensor " + name + " has unexpected shape");
  return t.template data<T>().data();
}

template <typename T, bool Mutable, typename Ckpt>
Params<T, Mutable> bind(Ckpt& ckpt, const ModelConfig& c) {
  Params<T, Mutable> p;
  const auto specs = tensor_specs(c);
  if (ckpt.size() != specs.size()) {
    throw ModelInputError("checkpoint has " + std::to_string(ckpt.size()) + " tensors, config expects " +
                          std::to_string(specs.size()));
  }
  auto get = [&](const std::string& name) {
    for (const auto& s : specs) {
      if (s.name == name) return tensor_ptr<T>(ckpt, name, s.dims);
    }
    throw ModelInputError("no spec for " + name);
  };
  p.tok = get("embed.tok");
  if (c.arch == Architecture::Affine) {
    p.head_bias = get("head.bias");
    return p;
  }
  p.pos = get("embed.pos");
  for (int i = 0; i < c.n_layers; ++i) {
    const std::string pre = "layer" + std::to_string(i) + ".";
    typename Params<T, Mutable>::Layer l{};
    l.ln1_w = get(pre + "ln1.weight");
    l.ln1_b = get(pre + "ln1.bias");
    l.qkv_w = get(pre + "attn.qkv.weight");
    l.qkv_b = get(pre + "attn.qkv.bias");
    l.proj_w = get(pre + "attn.proj.weight");
    l.proj_b = get(pre + "attn.proj.bias");
    l.ln2_w = get(pre + "ln2.weight");
    l.ln2_b = get(pre + "ln2.bias");
    l.fc_w = get(pre + "mlp.fc.weight");
    l.fc_b = get(pre + "mlp.fc.bias");
    l.fp_w = get(pre + "mlp.proj.weight");
    l.fp_b = get(pre + "mlp.proj.bias");
    p.layers.push_back(l);
  }
  p.lnf_w = get("ln_f.weight");
  p.lnf_b = get("ln_f.bias");
  if (!c.tie_embeddings) p.head = get("head.weight");
  return p;
}

// ---------------------------------------------------------------------------
// Kernels

// y[t] = b + x[t] @ W, W stored [in, out].
template <typename T>
void linear_fwd(const T* x, int L, int in, const T* W, const T* b, int out, T* y) {
  for (int t = 0; t < L; ++t) {
    T* yt = y + static_cast<std::size_t>(t) * out;
    if (b) {
      std::copy(b, b + out, yt);
    } else {
      std::fill(yt, yt + out, T(0));
    }
    const T* xt = x + static_cast<std::size_t>(t) * in;
    for (int i = 0; i < in; ++i) {
      const T xi = xt[i];
      const T* wi = W + static_cast<std::size_t>(i) * out;
      for (int o = 0; o < out; ++o) yt[o] += xi * wi[o];
    }
  }
}

// Accumulates dW, db and (when dx != nullptr) dx.
template <typename T>
void linear_bwd(const T* x, int L, int in, const T* W, int out, const T* dy, T* dx, T* dW, T* db) {
  for (int t = 0; t < L; ++t) {
    const T* dyt = dy + static_cast<std::size_t>(t) * out;
    const T* xt = x + static_cast<std::size_t>(t) * in;
    if (db) {
      for (int o = 0; o < out; ++o) db[o] += dyt[o];
    }
    for (int i = 0; i < in; ++i) {
      const T xi = xt[i];
      T* dwi = dW + static_cast<std::size_t>(i) * out;
      const T* wi = W + static_cast<std::size_t>(i) * out;
      T acc = 0;
      for (int o = 0; o < out; ++o) {
        dwi[o] += xi * dyt[o];
        acc += dyt[o] * wi[o];
      }
      if (dx) dx[static_cast<std::size_t>(t) * in + i] += acc;
    }
  }
}

template <typename T>
void layernorm_fwd(const T* x, const T* w, const T* b, int L, int d, T* hat, T* rstd, T* y) {
  for (int t = 0; t < L; ++t) {
    const T* xt = x + static_cast<std::size_t>(t) * d;
    T mean = 0;
    for (int i = 0; i < d; ++i) mean += xt[i];
    mean /= static_cast<T>(d);
    T var = 0;
    for (int i = 0; i < d; ++i) var += (xt[i] - mean) * (xt[i] - mean);
    var /= static_cast<T>(d);
    const T r = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
    rstd[t] = r;
    T* ht = hat + static_cast<std::size_t>(t) * d;
    T* yt = y + static_cast<std::size_t>(t) * d;
    for (int i = 0; i < d; ++i) {
      ht[i] = (xt[i] - mean) * r;
      yt[i] = ht[i] * w[i] + b[i];
    }
  }
}

// Accumulates dx, dw, db.
template <typename T>
void layernorm_bwd(const T* dy, const T* hat, const T* rstd, const T* w, int L, int d, T* dx, T* dw,
                   T* db) {
  std::vector<T> dhat(static_cast<std::size_t>(d));
  for (int t = 0; t < L; ++t) {
    const T* dyt = dy + static_cast<std::size_t>(t) * d;
    const T* ht = hat + static_cast<std::size_t>(t) * d;
    T m1 = 0, m2 = 0;
    for (int i = 0; i < d; ++i) {
      dw[i] += dyt[i] * ht[i];
      db[i] += dyt[i];
      dhat[i] = dyt[i] * w[i];
      m1 += dhat[i];
      m2 += dhat[i] * ht[i];
    }
    m1 /= static_cast<T>(d);
    m2 /= static_cast<T>(d);
    T* dxt = dx + static_cast<std::size_t>(t) * d;
    for (int i = 0; i < d; ++i) dxt[i] += rstd[t] * (dhat[i] - m1 - ht[i] * m2);
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

template <typename T>
T gelu(T x) {
  const T u = static_cast<T>(kGeluC) * (x + static_cast<T>(kGeluA) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
T gelu_grad(T x) {
  const T u = static_cast<T>(kGeluC) * (x + static_cast<T>(kGeluA) * x * x * x);
  const T th = std::tanh(u);
  const T du = static_cast<T>(kGeluC) * (T(1) + T(3) * static_cast<T>(kGeluA) * x * x);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

// ---------------------------------------------------------------------------
// Forward / backward

template <typename T>
struct LayerCache {
  std::vector<T> x_in, ln1_hat, ln1_rstd, a, qkv, probs, att, x_mid, ln2_hat, ln2_rstd, m, f, g;
};

template <typename T>
struct Cache {
  int L = 0;
  std::vector<LayerCache<T>> layers;
  std::vector<T> x_final, lnf_hat, lnf_rstd, hf, logits;
};

template <typename T>
void resize_cache(Cache<T>& c, const ModelConfig& cfg, int L) {
  const std::size_t l = L, d = cfg.d_model, f = cfg.d_ff, H = cfg.n_heads;
  c.L = L;
  c.logits.resize(l * cfg.vocab_size);
  if (cfg.arch == Architecture::Affine) return;
  c.layers.resize(cfg.n_layers);
  for (auto& lc : c.layers) {
    lc.x_in.resize(l * d);
    lc.ln1_hat.resize(l * d);
    lc.ln1_rstd.resize(l);
    lc.a.resize(l * d);
    lc.qkv.resize(l * 3 * d);
    lc.probs.assign(H * l * l, T(0));
    lc.att.resize(l * d);
    lc.x_mid.resize(l * d);
    lc.ln2_hat.resize(l * d);
    lc.ln2_rstd.resize(l);
    lc.m.resize(l * d);
    lc.f.resize(l * f);
    lc.g.resize(l * f);
  }
  c.x_final.resize(l * d);
  c.lnf_hat.resize(l * d);
  c.lnf_rstd.resize(l);
  c.hf.resize(l * d);
}

void check_tokens(const ModelConfig& cfg, std::span<const int> tokens) {
  if (tokens.empty()) throw ModelInputError("empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(cfg.context_len)) {
    throw ModelInputError("sequence length " + std::to_string(tokens.size()) + " exceeds context " +
                          std::to_string(cfg.context_len));
  }
  for (int tok : tokens) {
    if (tok < 0 || tok >= cfg.vocab_size) {
      throw ModelInputError("token id " + std::to_string(tok) + " outside vocabulary of size " +
                            std::to_string(cfg.vocab_size));
    }
  }
}

template <typename T>
void run_forward(const Params<T, false>& p, const ModelConfig& cfg, std::span<const int> tokens,
                 Cache<T>& c) {
  const int L = static_cast<int>(tokens.size());
  const int V = cfg.vocab_size;
  resize_cache(c, cfg, L);

  if (cfg.arch == Architecture::Affine) {
    for (int t = 0; t < L; ++t) {
      const T* row = p.tok + static_cast<std::size_t>(tokens[t]) * V;
      T* out = c.logits.data() + static_cast<std::size_t>(t) * V;
      for (int v = 0; v < V; ++v) out[v] = row[v] + p.head_bias[v];
    }
    return;
  }

  const int d = cfg.d_model, F = cfg.d_ff, H = cfg.n_heads, hd = d / H;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));

  std::vector<T> x(static_cast<std::size_t>(L) * d);
  for (int t = 0; t < L; ++t) {
    const T* te = p.tok + static_cast<std::size_t>(tokens[t]) * d;
    const T* pe = p.pos + static_cast<std::size_t>(t) * d;
    for (int i = 0; i < d; ++i) x[static_cast<std::size_t>(t) * d + i] = te[i] + pe[i];
  }

  std::vector<T> tmp(static_cast<std::size_t>(L) * d);
  std::vector<T> scores(static_cast<std::size_t>(L));
  for (int li = 0; li < cfg.n_layers; ++li) {
    const auto& w = p.layers[li];
    auto& lc = c.layers[li];
    lc.x_in = x;
    layernorm_fwd(x.data(), w.ln1_w, w.ln1_b, L, d, lc.ln1_hat.data(), lc.ln1_rstd.data(), lc.a.data());
    linear_fwd(lc.a.data(), L, d, w.qkv_w, w.qkv_b, 3 * d, lc.qkv.data());

    std::fill(lc.att.begin(), lc.att.end(), T(0));
    for (int h = 0; h < H; ++h) {
      T* P = lc.probs.data() + static_cast<std::size_t>(h) * L * L;
      for (int i = 0; i < L; ++i) {
        const T* q = lc.qkv.data() + static_cast<std::size_t>(i) * 3 * d + h * hd;
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j <= i; ++j) {
          const T* k = lc.qkv.data() + static_cast<std::size_t>(j) * 3 * d + d + h * hd;
          T s = 0;
          for (int e = 0; e < hd; ++e) s += q[e] * k[e];
          s *= scale;
          scores[j] = s;
          mx = std::max(mx, s);
        }
        T sum = 0;
        for (int j = 0; j <= i; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          sum += scores[j];
        }
        T* Pi = P + static_cast<std::size_t>(i) * L;
        T* out = lc.att.data() + static_cast<std::size_t>(i) * d + h * hd;
        for (int j = 0; j <= i; ++j) {
          Pi[j] = scores[j] / sum;
          const T* v = lc.qkv.data() + static_cast<std::size_t>(j) * 3 * d + 2 * d + h * hd;
          for (int e = 0; e < hd; ++e) out[e] += Pi[j] * v[e];
        }
      }
    }
    linear_fwd(lc.att.data(), L, d, w.proj_w, w.proj_b, d, tmp.data());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += tmp[i];
    lc.x_mid = x;

    layernorm_fwd(x.data(), w.ln2_w, w.ln2_b, L, d, lc.ln2_hat.data(), lc.ln2_rstd.data(), lc.m.data());
    linear_fwd(lc.m.data(), L, d, w.fc_w, w.fc_b, F, lc.f.data());
    for (std::size_t i = 0; i < lc.f.size(); ++i) lc.g[i] = gelu(lc.f[i]);
    linear_fwd(lc.g.data(), L, F, w.fp_w, w.fp_b, d, tmp.data());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += tmp[i];
  }
  c.x_final = x;
  layernorm_fwd(x.data(), p.lnf_w, p.lnf_b, L, d, c.lnf_hat.data(), c.lnf_rstd.data(), c.hf.data());
  if (cfg.tie_embeddings) {
    for (int t = 0; t < L; ++t) {
      const T* h = c.hf.data() + static_cast<std::size_t>(t) * d;
      T* out = c.logits.data() + static_cast<std::size_t>(t) * V;
      for (int v = 0; v < V; ++v) {
        const T* e = p.tok + static_cast<std::size_t>(v) * d;
        T s = 0;
        for (int i = 0; i < d; ++i) s += h[i] * e[i];
        out[v] = s;
      }
    }
  } else {
    linear_fwd(c.hf.data(), L, d, p.head, static_cast<const T*>(nullptr), V, c.logits.data());
  }
}

template <typename T>
void run_backward(const Params<T, false>& p, const Params<T, true>& g, const ModelConfig& cfg,
                  std::span<const int> tokens, const Cache<T>& c, const T* dlogits) {
  const int L = c.L;
  const int V = cfg.vocab_size;

  if (cfg.arch == Architecture::Affine) {
    for (int t = 0; t < L; ++t) {
      T* row = g.tok + static_cast<std::size_t>(tokens[t]) * V;
      const T* dl = dlogits + static_cast<std::size_t>(t) * V;
      for (int v = 0; v < V; ++v) {
        row[v] += dl[v];
        g.head_bias[v] += dl[v];
      }
    }
    return;
  }

  const int d = cfg.d_model, F = cfg.d_ff, H = cfg.n_heads, hd = d / H;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  const std::size_t Ld = static_cast<std::size_t>(L) * d;

  std::vector<T> dhf(Ld, T(0));
  if (cfg.tie_embeddings) {
    for (int t = 0; t < L; ++t) {
      const T* dl = dlogits + static_cast<std::size_t>(t) * V;
      const T* h = c.hf.data() + static_cast<std::size_t>(t) * d;
      T* dh = dhf.data() + static_cast<std::size_t>(t) * d;
      for (int v = 0; v < V; ++v) {
        const T* e = p.tok + static_cast<std::size_t>(v) * d;
        T* de = g.tok + static_cast<std::size_t>(v) * d;
        for (int i = 0; i < d; ++i) {
          dh[i] += dl[v] * e[i];
          de[i] += dl[v] * h[i];
        }
      }
    }
  } else {
    linear_bwd(c.hf.data(), L, d, p.head, V, dlogits, dhf.data(), g.head, static_cast<T*>(nullptr));
  }

  std::vector<T> dx(Ld, T(0));
  layernorm_bwd(dhf.data(), c.lnf_hat.data(), c.lnf_rstd.data(), p.lnf_w, L, d, dx.data(), g.lnf_w,
                g.lnf_b);

  std::vector<T> dg(static_cast<std::size_t>(L) * F), dm(Ld), datt(Ld),
      dqkv(static_cast<std::size_t>(L) * 3 * d), da(Ld), dP(static_cast<std::size_t>(L));
  for (int li = cfg.n_layers - 1; li >= 0; --li) {
    const auto& w = p.layers[li];
    const auto& gw = g.layers[li];
    const auto& lc = c.layers[li];

    // MLP branch: x_out = x_mid + proj(gelu(fc(ln2(x_mid))))
    std::fill(dg.begin(), dg.end(), T(0));
    linear_bwd(lc.g.data(), L, F, w.fp_w, d, dx.data(), dg.data(), gw.fp_w, gw.fp_b);
    for (std::size_t i = 0; i < dg.size(); ++i) dg[i] *= gelu_grad(lc.f[i]);
    std::fill(dm.begin(), dm.end(), T(0));
    linear_bwd(lc.m.data(), L, d, w.fc_w, F, dg.data(), dm.data(), gw.fc_w, gw.fc_b);
    // dx now holds d/dx_mid after adding the LayerNorm path.
    layernorm_bwd(dm.data(), lc.ln2_hat.data(), lc.ln2_rstd.data(), w.ln2_w, L, d, dx.data(), gw.ln2_w,
                  gw.ln2_b);

    // Attention branch: x_mid = x_in + proj(attn(ln1(x_in)))
    std::fill(datt.begin(), datt.end(), T(0));
    linear_bwd(lc.att.data(), L, d, w.proj_w, d, dx.data(), datt.data(), gw.proj_w, gw.proj_b);
    std::fill(dqkv.begin(), dqkv.end(), T(0));
    for (int h = 0; h < H; ++h) {
      const T* P = lc.probs.data() + static_cast<std::size_t>(h) * L * L;
      for (int i = 0; i < L; ++i) {
        const T* Pi = P + static_cast<std::size_t>(i) * L;
        const T* dout = datt.data() + static_cast<std::size_t>(i) * d + h * hd;
        T dot_sum = 0;
        for (int j = 0; j <= i; ++j) {
          const T* v = lc.qkv.data() + static_cast<std::size_t>(j) * 3 * d + 2 * d + h * hd;
          T* dv = dqkv.data() + static_cast<std::size_t>(j) * 3 * d + 2 * d + h * hd;
          T s = 0;
          for (int e = 0; e < hd; ++e) {
            s += dout[e] * v[e];
            dv[e] += Pi[j] * dout[e];
          }
          dP[j] = s;
          dot_sum += Pi[j] * s;
        }
        const T* q = lc.qkv.data() + static_cast<std::size_t>(i) * 3 * d + h * hd;
        T* dq = dqkv.data() + static_cast<std::size_t>(i) * 3 * d + h * hd;
        for (int j = 0; j <= i; ++j) {
          const T ds = Pi[j] * (dP[j] - dot_sum) * scale;
          const T* k = lc.qkv.data() + static_cast<std::size_t>(j) * 3 * d + d + h * hd;
          T* dk = dqkv.data() + static_cast<std::size_t>(j) * 3 * d + d + h * hd;
          for (int e = 0; e < hd; ++e) {
            dq[e] += ds * k[e];
            dk[e] += ds * q[e];
          }
        }
      }
    }
    std::fill(da.begin(), da.end(), T(0));
    linear_bwd(lc.a.data(), L, d, w.qkv_w, 3 * d, dqkv.data(), da.data(), gw.qkv_w, gw.qkv_b);
    layernorm_bwd(da.data(), lc.ln1_hat.data(), lc.ln1_rstd.data(), w.ln1_w, L, d, dx.data(), gw.ln1_w,
                  gw.ln1_b);
  }

  for (int t = 0; t < L; ++t) {
    const T* dxt = dx.data() + static_cast<std::size_t>(t) * d;
    T* dte = g.tok + static_cast<std::size_t>(tokens[t]) * d;
    T* dpe = g.pos + static_cast<std::size_t>(t) * d;
    for (int i = 0; i < d; ++i) {
      dte[i] += dxt[i];
      dpe[i] += dxt[i];
    }
  }
}

// Next-token NLL of one sequence; writes (softmax - onehot) * weight into
// dlogits when given.
template <typename T>
double sequence_nll(const Cache<T>& c, int V, std::span<const int> tokens, T weight, T* dlogits) {
  double total = 0.0;
  for (int t = 0; t + 1 < c.L; ++t) {
    const T* z = c.logits.data() + static_cast<std::size_t>(t) * V;
    const T mx = *std::max_element(z, z + V);
    double sum = 0.0;
    for (int v = 0; v < V; ++v) sum += std::exp(static_cast<double>(z[v] - mx));
    const double log_norm = static_cast<double>(mx) + std::log(sum);
    const int target = tokens[t + 1];
    total += log_norm - static_cast<double>(z[target]);
    if (dlogits) {
      T* dl = dlogits + static_cast<std::size_t>(t) * V;
      for (int v = 0; v < V; ++v) {
        dl[v] = static_cast<T>(std::exp(static_cast<double>(z[v]) - log_norm)) * weight;
      }
      dl[target] -= weight;
    }
  }
  if (dlogits) {
    T* dl = dlogits + static_cast<std::size_t>(c.L - 1) * V;
    std::fill(dl, dl + V, T(0));
  }
  return total;
}

std::size_t count_positions(std::span<const TokenSeq> batch) {
  std::size_t n = 0;
  for (const auto& s : batch) n += s.empty() ? 0 : s.size() - 1;
  return n;
}

template <typename T>
LossAndGrad loss_and_grad_impl(const Checkpoint& ckpt, const ModelConfig& cfg,
                               std::span<const TokenSeq> batch, bool want_grad) {
  const auto p = bind<T, false>(ckpt, cfg);
  LossAndGrad out;
  Params<T, true> g;
  if (want_grad) {
    out.grad = ckpt.zeros_like();
    g = bind<T, true>(out.grad, cfg);
  }
  const std::size_t n = count_positions(batch);
  if (n == 0) throw ModelInputError("batch has no next-token positions");
  const T weight = static_cast<T>(1.0 / static_cast<double>(n));
  Cache<T> cache;
  std::vector<T> dl;
  double total = 0.0;
  for (const auto& seq : batch) {
    if (seq.size() < 2) {
      check_tokens(cfg, seq);
      continue;
    }
    check_tokens(cfg, seq);
    run_forward(p, cfg, seq, cache);
    if (want_grad) {
      dl.resize(cache.logits.size());
      total += sequence_nll(cache, cfg.vocab_size, seq, weight, dl.data());
      run_backward(p, g, cfg, seq, cache, dl.data());
    } else {
      total += sequence_nll<T>(cache, cfg.vocab_size, seq, weight, nullptr);
    }
  }
  out.loss = total / static_cast<double>(n);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Public API

Checkpoint init_model(const ModelConfig& config, std::uint64_t seed, DType dtype) {
  config.validate();
  Rng rng(seed);
  Checkpoint ckpt;
  for (const auto& s : tensor_specs(config)) {
    Tensor t = Tensor::zeros(s.dims, dtype);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      switch (s.init) {
        case TensorSpec::Init::Normal:
          t.set(i, rng.normal(0.0, 0.02));
          break;
        case TensorSpec::Init::Ones:
          t.set(i, 1.0);
          break;
        case TensorSpec::Init::Zeros:
          break;
      }
    }
    ckpt.add(s.name, std::move(t));
  }
  ckpt.meta()["config"] = config.to_json();
  ckpt.meta()["config_digest"] = config.digest();
  ckpt.meta()["provenance"] = "init";
  ckpt.meta()["seed"] = std::to_string(seed);
  return ckpt;
}

LogitsMatrix forward(const Checkpoint& ckpt, std::span<const int> tokens) {
  const ModelConfig cfg = config_of(ckpt);
  check_tokens(cfg, tokens);
  LogitsMatrix out;
  out.rows = tokens.size();
  out.cols = static_cast<std::size_t>(cfg.vocab_size);
  auto run = [&](auto tag) {
    using T = decltype(tag);
    Cache<T> cache;
    run_forward(bind<T, false>(ckpt, cfg), cfg, tokens, cache);
    out.data.assign(cache.logits.begin(), cache.logits.end());
  };
  if (ckpt.dtype() == DType::F32) {
    run(float{});
  } else {
    run(double{});
  }
  return out;
}

Checkpoint backward_from_logits(const Checkpoint& ckpt, std::span<const int> tokens,
                                const LogitsMatrix& upstream) {
  const ModelConfig cfg = config_of(ckpt);
  check_tokens(cfg, tokens);
  if (upstream.rows != tokens.size() || upstream.cols != static_cast<std::size_t>(cfg.vocab_size)) {
    throw ModelInputError("upstream gradient shape does not match logits");
  }
  Checkpoint grad = ckpt.zeros_like();
  auto run = [&](auto tag) {
    using T = decltype(tag);
    const auto p = bind<T, false>(ckpt, cfg);
    const auto g = bind<T, true>(grad, cfg);
    Cache<T> cache;
    run_forward(p, cfg, tokens, cache);
    std::vector<T> dl(upstream.data.begin(), upstream.data.end());
    run_backward(p, g, cfg, tokens, cache, dl.data());
  };
  if (ckpt.dtype() == DType::F32) {
    run(float{});
  } else {
    run(double{});
  }
  return grad;
}

LossAndGrad loss_and_grad(const Checkpoint& ckpt, std::span<const TokenSeq> batch) {
  if (batch.empty()) throw ModelInputError("empty batch");
  const ModelConfig cfg = config_of(ckpt);
  return ckpt.dtype() == DType::F32 ? loss_and_grad_impl<float>(ckpt, cfg, batch, true)
                                    : loss_and_grad_impl<double>(ckpt, cfg, batch, true);
}

double loss_nll(const Checkpoint& ckpt, std::span<const TokenSeq> batch) {
  if (batch.empty()) throw ModelInputError("empty batch");
  const ModelConfig cfg = config_of(ckpt);
  return ckpt.dtype() == DType::F32 ? loss_and_grad_impl<float>(ckpt, cfg, batch, false).loss
                                    : loss_and_grad_impl<double>(ckpt, cfg, batch, false).loss;
}

Checkpoint grad(const Checkpoint& ckpt, std::span<const TokenSeq> batch) {
  return loss_and_grad(ckpt, batch).grad;
}

namespace {

template <typename T>
void adamw_step(Checkpoint& params, const Checkpoint& grads, Checkpoint& m, Checkpoint& v,
                const TrainConfig& cfg, double lr, int t) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, tensor] : params.tensors()) {
    auto theta = tensor.template data<T>();
    auto g = grads.at(name).template data<T>();
    auto mm = m.at(name).template data<T>();
    auto vv = v.at(name).template data<T>();
    const double decay = tensor.rank() >= 2 ? cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = g[i];
      const double mi = cfg.beta1 * mm[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * vv[i] + (1.0 - cfg.beta2) * gi * gi;
      mm[i] = static_cast<T>(mi);
      vv[i] = static_cast<T>(vi);
      double th = theta[i];
      th -= lr * decay * th;
      th -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.epsilon);
      theta[i] = static_cast<T>(th);
    }
  }
}

}  // namespace

Checkpoint train(const Checkpoint& init, std::span<const TokenSeq> dataset, const TrainConfig& cfg,
                 const TrainCallback& on_step) {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("training dataset is empty");
  if (cfg.steps == 0) return init;
  const ModelConfig mcfg = config_of(init);
  const DType dtype = init.dtype();

  Checkpoint params = init;
  Checkpoint m = init.zeros_like();
  Checkpoint v = init.zeros_like();
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  std::vector<TokenSeq> batch;
  double last_loss = 0.0;
  for (int step = 0; step < cfg.steps; ++step) {
    batch.clear();
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(dataset[order[cursor++]]);
    }
    auto lg = dtype == DType::F32 ? loss_and_grad_impl<float>(params, mcfg, batch, true)
                                  : loss_and_grad_impl<double>(params, mcfg, batch, true);
    if (!std::isfinite(lg.loss)) throw TrainingDiverged(step);
    const double lr = cfg.lr_at(step);
    if (dtype == DType::F32) {
      adamw_step<float>(params, lg.grad, m, v, cfg, lr, step + 1);
    } else {
      adamw_step<double>(params, lg.grad, m, v, cfg, lr, step + 1);
    }
    last_loss = lg.loss;
    if (on_step) on_step({step, lr, lg.loss});
  }

  params.meta() = {};
  params.meta()["config"] = init.meta_or("config", mcfg.to_json());
  params.meta()["config_digest"] = mcfg.digest();
  params.meta()["provenance"] = "trained";
  params.meta()["init_digest"] = tensor_digest(init);
  params.meta()["train.config"] = cfg.to_json();
  params.meta()["train.final_loss"] = format_double(last_loss);
  params.meta()["seed"] = init.meta_or("seed", "?") + "/train:" + std::to_string(cfg.seed);
  return params;
}

double perplexity(const Checkpoint& scorer, std::span<const TokenSeq> texts) {
  if (texts.empty()) throw std::invalid_argument("perplexity of an empty text set");
  return std::exp(loss_nll(scorer, texts));
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  if (p.empty()) return p;
  const double mx = *std::max_element(p.begin(), p.end());
  double sum = 0.0;
  for (auto& x : p) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (auto& x : p) x /= sum;
  return p;
}

std::vector<double> next_token_distribution(const Checkpoint& ckpt, std::span<const int> prompt) {
  const auto logits = forward(ckpt, prompt);
  return softmax(logits.row(logits.rows - 1));
}

std::vector<int> nucleus(std::span<const double> probs, double top_p) {
  std::vector<int> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return probs[a] > probs[b]; });
  double cum = 0.0;
  std::size_t keep = order.size();
  for (std::size_t i = 0; i < order.size(); ++i) {
    cum += probs[order[i]];
    if (cum >= top_p) {
      keep = i + 1;
      break;
    }
  }
  order.resize(std::max<std::size_t>(keep, 1));
  return order;
}

TokenSeq sample_with(const LogitsFn& logits_fn, std::span<const int> prompt, const GenConfig& cfg,
                     int context_len, SampleTrace* trace) {
  cfg.validate();
  if (prompt.empty()) throw ModelInputError("empty prompt");
  if (prompt.size() > static_cast<std::size_t>(context_len)) {
    throw ModelInputError("prompt does not fit the context window");
  }
  Rng rng(cfg.seed);
  TokenSeq ctx(prompt.begin(), prompt.end());
  TokenSeq generated;
  for (int n = 0; n < cfg.max_new_tokens; ++n) {
    if (ctx.size() >= static_cast<std::size_t>(context_len)) break;
    std::vector<double> z = logits_fn(ctx);
    if (cfg.temperature != 1.0) {
      for (auto& x : z) x /= cfg.temperature;
    }
    const auto probs = softmax(z);
    const auto kept = nucleus(probs, cfg.top_p);
    double mass = 0.0;
    for (int id : kept) mass += probs[id];
    const double u = rng.uniform() * mass;
    double cum = 0.0;
    int token = kept.back();
    for (int id : kept) {
      cum += probs[id];
      if (u < cum) {
        token = id;
        break;
      }
    }
    if (trace) trace->push_back({kept, token});
    ctx.push_back(token);
    generated.push_back(token);
    if (token == kEosToken) break;
  }
  return generated;
}

TokenSeq sample(const Checkpoint& ckpt, std::span<const int> prompt, const GenConfig& cfg,
                SampleTrace* trace) {
  const ModelConfig mcfg = config_of(ckpt);
  auto fn = [&ckpt](std::span<const int> ctx) {
    const auto logits = forward(ckpt, ctx);
    const auto row = logits.row(logits.rows - 1);
    return std::vector<double>(row.begin(), row.end());
  };
  return sample_with(fn, prompt, cfg, mcfg.context_len, trace);
}

}  // namespace lmi
