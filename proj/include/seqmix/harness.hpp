#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "seqmix/backward.hpp"
#include "seqmix/recurrence.hpp"

namespace seqmix {

enum class TaskKind { copy, assoc_recall };

inline const char* to_string(TaskKind k) { return k == TaskKind::copy ? "copy" : "assoc_recall"; }

inline TaskKind parse_task(const std::string& s) {
  if (s == "copy") return TaskKind::copy;
  if (s == "assoc_recall") return TaskKind::assoc_recall;
  throw ConfigError("unknown task '" + s + "'; valid tasks: copy, assoc_recall");
}

struct Batch {
  std::size_t batch = 0, seq_len = 0;
  std::vector<std::uint32_t> tokens;   // [B, N]
  std::vector<std::uint32_t> targets;  // [B, N]
  std::vector<std::uint8_t> loss_mask; // [B, N]
};

// Token 0 is padding. Copy uses token 1 as the delimiter and [2, vocab) as
// content. Recall keys come from [1, 1 + K) and values from [1 + K, vocab),
// K = (vocab - 1) / 2, so the two ranges never overlap.
struct SyntheticTask {
  TaskKind kind = TaskKind::assoc_recall;
  std::size_t vocab = 32;
  std::size_t seq_len = 64;
  std::size_t n_pairs = 8;
  std::uint64_t seed = 0;

  std::size_t key_range() const { return (vocab - 1) / 2; }

  void validate() const {
    if (seq_len < 2) throw ConfigError("task seq_len must be >= 2");
    if (kind == TaskKind::assoc_recall) {
      if (n_pairs < 1) throw ConfigError("assoc_recall needs n_pairs >= 1");
      if (key_range() < n_pairs || vocab - 1 - key_range() < 1)
        throw ConfigError("vocab " + std::to_string(vocab) + " too small for " +
                          std::to_string(n_pairs) + " distinct keys plus values");
      if (2 * n_pairs + 1 > seq_len)
        throw ConfigError("seq_len too short for " + std::to_string(n_pairs) + " pairs");
    } else if (vocab < 3) {
      throw ConfigError("copy needs vocab >= 3 (pad, delimiter, content)");
    }
  }
};

// Draws B sequences from rng. Targets are a pure function of the tokens.
inline Batch generate_batch(const SyntheticTask& task, std::size_t batch, std::mt19937_64& rng) {
  task.validate();
  const std::size_t n = task.seq_len;
  Batch b{batch, n, std::vector<std::uint32_t>(batch * n, 0),
          std::vector<std::uint32_t>(batch * n, 0), std::vector<std::uint8_t>(batch * n, 0)};
  for (std::size_t s = 0; s < batch; ++s) {
    auto* tok = b.tokens.data() + s * n;
    auto* tgt = b.targets.data() + s * n;
    auto* msk = b.loss_mask.data() + s * n;
    if (task.kind == TaskKind::copy) {
      // stream = pad* prefix 1 prefix; inputs are stream[0..n), targets stream[1..n]
      const std::size_t len = n / 2;
      std::vector<std::uint32_t> stream(n + 1 - (2 * len + 1), 0);
      std::uniform_int_distribution<std::uint32_t> content(2, static_cast<std::uint32_t>(task.vocab - 1));
      std::vector<std::uint32_t> prefix(len);
      for (auto& p : prefix) p = content(rng);
      stream.insert(stream.end(), prefix.begin(), prefix.end());
      stream.push_back(1);
      stream.insert(stream.end(), prefix.begin(), prefix.end());
      const std::size_t delim = stream.size() - len - 1;
      for (std::size_t t = 0; t < n; ++t) {
        tok[t] = stream[t];
        tgt[t] = stream[t + 1];
        msk[t] = t >= delim ? 1 : 0;
      }
    } else {
      const std::size_t kr = task.key_range(), vr = task.vocab - 1 - kr, p = task.n_pairs;
      std::vector<std::uint32_t> keys(kr);
      for (std::size_t i = 0; i < kr; ++i) keys[i] = static_cast<std::uint32_t>(1 + i);
      for (std::size_t i = 0; i < p; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, kr - 1);
        std::swap(keys[i], keys[pick(rng)]);
      }
      std::uniform_int_distribution<std::uint32_t> value(0, static_cast<std::uint32_t>(vr - 1));
      std::uniform_int_distribution<std::size_t> query(0, p - 1);
      const std::size_t start = n - (2 * p + 1);
      std::vector<std::uint32_t> vals(p);
      for (std::size_t i = 0; i < p; ++i) {
        vals[i] = static_cast<std::uint32_t>(1 + kr) + value(rng);
        tok[start + 2 * i] = keys[i];
        tok[start + 2 * i + 1] = vals[i];
      }
      const std::size_t qi = query(rng);
      tok[n - 1] = keys[qi];
      tgt[n - 1] = vals[qi];
      msk[n - 1] = 1;
    }
  }
  return b;
}

enum class OptimizerKind { adamw, sgd };

struct TinyModelConfig {
  std::size_t d_model = 64, n_heads = 2, d_head = 32, n_layers = 2, vocab = 32, seq_len = 64;
  VariantConfig variant = preset("twomamba");
  std::string preset_name = "twomamba";
  std::size_t mlp_mult = 2;
  OptimizerKind optimizer = OptimizerKind::adamw;
  double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::size_t warmup_steps = 0;  // 0 = 5% of total_steps
  std::size_t total_steps = 2000;
  double weight_decay = 0.01;
  std::size_t batch = 16;
  std::size_t eval_every = 100;
  std::size_t eval_batch = 256;
  std::uint64_t seed = 0;

  std::size_t effective_warmup() const {
    return warmup_steps ? warmup_steps : std::max<std::size_t>(1, total_steps / 20);
  }

  void validate() const {
    variant.validate();
    if (d_model != n_heads * d_head)
      throw ConfigError("d_model must equal n_heads * d_head (" + std::to_string(d_model) +
                        " vs " + std::to_string(n_heads) + "*" + std::to_string(d_head) + ")");
    if (n_layers < 1 || vocab < 2 || seq_len < 1 || mlp_mult < 1 || batch < 1)
      throw ConfigError("tiny model dimensions must be positive");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  }

  std::map<std::string, std::string> to_kv() const {
    std::map<std::string, std::string> kv = seqmix::to_kv(variant);
    auto num = [](auto v) {
      std::ostringstream os;
      os.precision(17);
      os << v;
      return os.str();
    };
    kv["preset"] = preset_name;
    kv["d_model"] = num(d_model);
    kv["n_heads"] = num(n_heads);
    kv["d_head"] = num(d_head);
    kv["n_layers"] = num(n_layers);
    kv["vocab"] = num(vocab);
    kv["seq_len"] = num(seq_len);
    kv["mlp_mult"] = num(mlp_mult);
    kv["optimizer"] = optimizer == OptimizerKind::adamw ? "adamw" : "sgd";
    kv["lr"] = num(lr);
    kv["beta1"] = num(beta1);
    kv["beta2"] = num(beta2);
    kv["warmup_steps"] = num(effective_warmup());
    kv["total_steps"] = num(total_steps);
    kv["weight_decay"] = num(weight_decay);
    kv["batch"] = num(batch);
    kv["eval_every"] = num(eval_every);
    kv["eval_batch"] = num(eval_batch);
    kv["seed"] = num(seed);
    return kv;
  }
};

struct TinyLayer {
  Tensor<double> norm1;     // [D]
  BlockWeights<double> block;
  Tensor<double> norm2;     // [D]
  Tensor<double> w1;        // [D, mD]
  Tensor<double> w2;        // [mD, D]
};

// Embedding -> n_layers x (x + block(norm(x)), x + mlp(norm(x))) -> norm ->
// tied unembedding.
struct TinyModel {
  VariantConfig variant;
  Tensor<double> embed;  // [V, D]
  std::vector<TinyLayer> layers;
  Tensor<double> final_norm;  // [D]

  template <typename F>
  void visit(F&& f) {
    f(std::string("embed"), embed);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      auto& L = layers[l];
      f(p + "norm1", L.norm1);
      for_each_param(variant, L.block,
                     [&](const char* name, Tensor<double>& t) { f(p + "block." + name, t); });
      f(p + "norm2", L.norm2);
      f(p + "w1", L.w1);
      f(p + "w2", L.w2);
    }
    f(std::string("final_norm"), final_norm);
  }

  std::vector<Tensor<double>*> params() {
    std::vector<Tensor<double>*> out;
    visit([&](const std::string&, Tensor<double>& t) { out.push_back(&t); });
    return out;
  }
  std::vector<std::string> param_names() {
    std::vector<std::string> out;
    visit([&](const std::string& n, Tensor<double>&) { out.push_back(n); });
    return out;
  }
};

inline TinyModel init_tiny_model(const TinyModelConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  TinyModel m;
  m.variant = cfg.variant;
  const std::size_t d = cfg.d_model, hidden = cfg.mlp_mult * d;
  auto gaussian = [&rng](Shape s, double stddev) {
    std::normal_distribution<double> nd(0.0, stddev);
    Tensor<double> t(std::move(s));
    for (auto& x : t.data()) x = nd(rng);
    return t;
  };
  m.embed = gaussian({cfg.vocab, d}, 1.0 / std::sqrt(static_cast<double>(d)));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    TinyLayer L;
    L.norm1 = Tensor<double>({d}, 1.0);
    L.block = init_block_weights<double>(cfg.variant, d, cfg.n_heads, cfg.d_head, rng);
    L.norm2 = Tensor<double>({d}, 1.0);
    L.w1 = gaussian({d, hidden}, 1.0 / std::sqrt(static_cast<double>(d)));
    L.w2 = gaussian({hidden, d}, 1.0 / std::sqrt(static_cast<double>(hidden)));
    m.layers.push_back(std::move(L));
  }
  m.final_norm = Tensor<double>({d}, 1.0);
  return m;
}

inline TinyModel zeros_like(const TinyModel& m) {
  TinyModel z = m;
  z.visit([](const std::string&, Tensor<double>& t) { t.fill(0.0); });
  return z;
}

struct LayerCache {
  Tensor<double> x_in, a;
  BlockTrace<double> tr;
  Tensor<double> x_mid, c, u, s;
};

struct SequenceCache {
  std::vector<LayerCache> layers;
  Tensor<double> x_final, f, logits;
};

inline Tensor<double> embed_tokens(const TinyModel& m, const std::uint32_t* tokens, std::size_t n) {
  const std::size_t d = m.embed.dim(1), vocab = m.embed.dim(0);
  Tensor<double> x({n, d});
  for (std::size_t t = 0; t < n; ++t) {
    if (tokens[t] >= vocab) throw RangeError("token id out of vocabulary");
    for (std::size_t c = 0; c < d; ++c) x(t, c) = m.embed(tokens[t], c);
  }
  return x;
}

inline SequenceCache model_forward(const TinyModel& m, const std::uint32_t* tokens, std::size_t n) {
  SequenceCache sc;
  Tensor<double> x = embed_tokens(m, tokens, n);
  for (const auto& L : m.layers) {
    LayerCache lc;
    lc.x_in = x;
    lc.a = rms_norm(x, L.norm1);
    lc.tr = variant_forward_trace(lc.a, m.variant, L.block);
    lc.x_mid = x + lc.tr.out;
    lc.c = rms_norm(lc.x_mid, L.norm2);
    lc.u = matmul(lc.c, L.w1);
    lc.s = silu(lc.u);
    x = lc.x_mid + matmul(lc.s, L.w2);
    sc.layers.push_back(std::move(lc));
  }
  sc.x_final = x;
  sc.f = rms_norm(x, m.final_norm);
  sc.logits = matmul(sc.f, transpose_last(m.embed));
  return sc;
}

// Sum over masked positions of -log softmax(logits)[target]; fills dlogits
// with (softmax - onehot) * scale on those rows when requested.
struct CeStats {
  double loss_sum = 0.0;
  std::size_t count = 0, correct = 0;
};

inline CeStats cross_entropy(const Tensor<double>& logits, const std::uint32_t* targets,
                             const std::uint8_t* mask, Tensor<double>* dlogits = nullptr,
                             double scale = 1.0) {
  const std::size_t n = logits.dim(0), vocab = logits.dim(1);
  CeStats st;
  if (dlogits) *dlogits = Tensor<double>(logits.shape());
  for (std::size_t t = 0; t < n; ++t) {
    if (!mask[t]) continue;
    auto row = logits.row(t);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (auto v : row) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    st.loss_sum += lse - row[targets[t]];
    ++st.count;
    const auto argmax = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (argmax == targets[t]) ++st.correct;
    if (dlogits) {
      auto dr = dlogits->row(t);
      for (std::size_t v = 0; v < vocab; ++v) dr[v] = std::exp(row[v] - lse) * scale;
      dr[targets[t]] -= scale;
    }
  }
  return st;
}

// Accumulates d(loss_scale * CE) / d(params) of one sequence into grad.
inline void model_backward(const TinyModel& m, const SequenceCache& sc, const std::uint32_t* tokens,
                           const Tensor<double>& dlogits, TinyModel& grad) {
  const std::size_t n = dlogits.dim(0), d = m.embed.dim(1), vocab = m.embed.dim(0);
  // logits = f E^T
  detail::gemm_tn(dlogits.data().data(), sc.f.data().data(), grad.embed.data().data(), vocab, n, d,
                  true);
  Tensor<double> df = matmul(dlogits, m.embed);
  Tensor<double> dx;
  rms_norm_backward(sc.x_final, m.final_norm, df, dx, grad.final_norm);

  for (std::size_t li = m.layers.size(); li-- > 0;) {
    const auto& L = m.layers[li];
    const auto& lc = sc.layers[li];
    auto& G = grad.layers[li];
    const std::size_t hidden = L.w1.dim(1);
    // x_out = x_mid + silu(c W1) W2
    detail::gemm_tn(lc.s.data().data(), dx.data().data(), G.w2.data().data(), hidden, n, d, true);
    Tensor<double> ds = matmul(dx, transpose_last(L.w2));
    for (std::size_t i = 0; i < ds.size(); ++i) ds[i] *= silu_grad(lc.u[i]);
    detail::gemm_tn(lc.c.data().data(), ds.data().data(), G.w1.data().data(), d, n, hidden, true);
    Tensor<double> dc = matmul(ds, transpose_last(L.w1));
    Tensor<double> dmid;
    rms_norm_backward(lc.x_mid, L.norm2, dc, dmid, G.norm2);
    dmid += dx;
    // x_mid = x_in + block(norm1(x_in))
    BlockGrads<double> bg = variant_backward(lc.a, m.variant, L.block, lc.tr, dmid);
    auto gp = std::vector<Tensor<double>*>{};
    for_each_param(m.variant, G.block, [&](const char*, Tensor<double>& t) { gp.push_back(&t); });
    std::size_t k = 0;
    for_each_param(m.variant, bg.dw, [&](const char*, Tensor<double>& t) { *gp[k++] += t; });
    Tensor<double> din;
    rms_norm_backward(lc.x_in, L.norm1, bg.dh, din, G.norm1);
    dx = dmid + din;
  }
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t c = 0; c < d; ++c) grad.embed(tokens[t], c) += dx(t, c);
}

// Mean masked cross-entropy over the batch, and optionally its gradient.
struct BatchResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t count = 0;
};

inline BatchResult batch_loss(const TinyModel& m, const Batch& b, TinyModel* grad = nullptr) {
  std::size_t total = 0;
  for (auto v : b.loss_mask) total += v;
  if (total == 0) throw PreconditionError("batch has no supervised positions");
  const double scale = 1.0 / static_cast<double>(total);
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t s = 0; s < b.batch; ++s) {
    const auto* tok = b.tokens.data() + s * b.seq_len;
    const auto* tgt = b.targets.data() + s * b.seq_len;
    const auto* msk = b.loss_mask.data() + s * b.seq_len;
    SequenceCache sc = model_forward(m, tok, b.seq_len);
    Tensor<double> dlogits;
    const CeStats st = cross_entropy(sc.logits, tgt, msk, grad ? &dlogits : nullptr, scale);
    loss += st.loss_sum;
    correct += st.correct;
    if (grad) model_backward(m, sc, tok, dlogits, *grad);
  }
  return {loss * scale, static_cast<double>(correct) / static_cast<double>(total), total};
}

// AdamW with decoupled decay on rank-2 tensors only, or plain SGD.
class Optimizer {
 public:
  Optimizer(const TinyModelConfig& cfg, TinyModel& model) : cfg_(cfg) {
    for (auto* p : model.params()) {
      m_.emplace_back(p->shape());
      v_.emplace_back(p->shape());
    }
  }

  double lr_at(std::size_t step) const {
    const std::size_t warm = cfg_.effective_warmup();
    if (step < warm) return cfg_.lr * static_cast<double>(step + 1) / static_cast<double>(warm);
    return cfg_.lr;
  }

  void step(TinyModel& model, TinyModel& grad) {
    auto ps = model.params();
    auto gs = grad.params();
    const double lr = lr_at(t_);
    ++t_;
    if (cfg_.optimizer == OptimizerKind::sgd) {
      for (std::size_t i = 0; i < ps.size(); ++i)
        for (std::size_t j = 0; j < ps[i]->size(); ++j) (*ps[i])[j] -= lr * (*gs[i])[j];
      return;
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < ps.size(); ++i) {
      auto& p = *ps[i];
      const auto& g = *gs[i];
      const bool decay = p.rank() == 2;
      for (std::size_t j = 0; j < p.size(); ++j) {
        m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g[j];
        v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        const double upd = (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + cfg_.adam_eps);
        if (decay) p[j] -= lr * cfg_.weight_decay * p[j];
        p[j] -= lr * upd;
      }
    }
  }

 private:
  TinyModelConfig cfg_;
  std::vector<Tensor<double>> m_, v_;
  std::size_t t_ = 0;
};

// Flat weights file: uint64 tensor count, then per tensor uint64 rank,
// uint64 extents and little-endian doubles.
inline std::vector<std::uint8_t> serialize_weights(TinyModel& m) {
  std::vector<std::uint8_t> out;
  auto ps = m.params();
  detail::put_u64(out, ps.size());
  for (auto* p : ps) {
    detail::put_u64(out, p->rank());
    for (auto e : p->shape()) detail::put_u64(out, e);
    for (auto x : p->data()) detail::put_f64(out, x);
  }
  return out;
}

inline void deserialize_weights(TinyModel& m, std::span<const std::uint8_t> in) {
  std::size_t off = 0;
  auto need = [&](std::size_t bytes) {
    if (off + bytes > in.size()) throw DimensionError("weights file truncated");
  };
  need(8);
  auto ps = m.params();
  if (detail::get_u64(in, off) != ps.size()) throw DimensionError("weights file tensor count mismatch");
  off += 8;
  for (auto* p : ps) {
    need(8);
    const std::size_t rank = detail::get_u64(in, off);
    off += 8;
    Shape s(rank);
    for (auto& e : s) {
      need(8);
      e = detail::get_u64(in, off);
      off += 8;
    }
    if (s != p->shape()) throw DimensionError("weights file shape mismatch");
    for (auto& x : p->data()) {
      need(8);
      x = detail::get_f64(in, off);
      off += 8;
    }
  }
  if (off != in.size()) throw DimensionError("weights file has trailing bytes");
}

struct LossRow {
  std::size_t step = 0;
  double train_loss = 0.0;
  std::optional<double> eval_loss, eval_acc;
};

struct TrainResult {
  std::vector<LossRow> curve;
  double final_eval_loss = 0.0;
  double final_eval_acc = 0.0;
  bool diverged = false;
  std::string diagnostic;
  std::size_t steps_run = 0;
};

inline constexpr std::uint64_t kEvalSeedOffset = 0x9E3779B97F4A7C15ULL;

inline BatchResult evaluate(const TinyModel& m, const TinyModelConfig& cfg,
                            const SyntheticTask& task) {
  std::mt19937_64 rng(task.seed ^ kEvalSeedOffset);
  return batch_loss(m, generate_batch(task, cfg.eval_batch, rng));
}

inline void write_loss_csv(std::ostream& os, const std::vector<LossRow>& rows) {
  os << "step,train_loss,eval_loss,eval_acc\n";
  os.precision(10);
  for (const auto& r : rows) {
    os << r.step << ',' << r.train_loss << ',';
    if (r.eval_loss) os << *r.eval_loss;
    os << ',';
    if (r.eval_acc) os << *r.eval_acc;
    os << '\n';
  }
}

// Trains on fresh batches from the task's seed stream and evaluates on a
// fixed held-out stream. When run_dir is given it receives config.txt,
// loss.csv and weights.bin.
inline TrainResult train(const TinyModelConfig& cfg, const SyntheticTask& task,
                         const std::optional<std::filesystem::path>& run_dir = std::nullopt,
                         TinyModel* out_model = nullptr) {
  cfg.validate();
  task.validate();
  if (task.vocab != cfg.vocab || task.seq_len != cfg.seq_len)
    throw ConfigError("task vocab/seq_len must match the model config");
  std::mt19937_64 init_rng(cfg.seed);
  TinyModel model = init_tiny_model(cfg, init_rng);
  Optimizer opt(cfg, model);
  std::mt19937_64 data_rng(task.seed);
  TrainResult res;

  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    const Batch b = generate_batch(task, cfg.batch, data_rng);
    TinyModel grad = zeros_like(model);
    LossRow row{step, 0.0, {}, {}};
    try {
      row.train_loss = batch_loss(model, b, &grad).loss;
      if (!std::isfinite(row.train_loss)) throw NonFiniteError("training loss is not finite");
      opt.step(model, grad);
    } catch (const NonFiniteError& e) {
      res.diverged = true;
      res.diagnostic = "diverged at step " + std::to_string(step) + ": " + e.what();
      res.steps_run = step;
      break;
    }
    const bool last = step + 1 == cfg.total_steps;
    if ((cfg.eval_every && (step + 1) % cfg.eval_every == 0) || last) {
      const BatchResult ev = evaluate(model, cfg, task);
      row.eval_loss = ev.loss;
      row.eval_acc = ev.accuracy;
      res.final_eval_loss = ev.loss;
      res.final_eval_acc = ev.accuracy;
    }
    res.curve.push_back(row);
    res.steps_run = step + 1;
  }

  if (run_dir) {
    std::filesystem::create_directories(*run_dir);
    std::ofstream cf(*run_dir / "config.txt");
    auto kv = cfg.to_kv();
    kv["task"] = to_string(task.kind);
    kv["n_pairs"] = std::to_string(task.n_pairs);
    kv["task_seed"] = std::to_string(task.seed);
    for (const auto& [k, v] : kv) cf << k << '=' << v << '\n';
    if (res.diverged) cf << "status=diverged\ndiagnostic=" << res.diagnostic << '\n';
    std::ofstream lf(*run_dir / "loss.csv");
    write_loss_csv(lf, res.curve);
    const auto bytes = serialize_weights(model);
    std::ofstream wf(*run_dir / "weights.bin", std::ios::binary);
    wf.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  if (out_model) *out_model = std::move(model);
  return res;
}

struct SweepEntry {
  double lr = 0.0;
  TrainResult result;
};

// Runs each learning rate and returns all entries, best (lowest final eval
// loss among non-diverged runs) first.
inline std::vector<SweepEntry> lr_sweep(TinyModelConfig cfg, const SyntheticTask& task,
                                        const std::vector<double>& lrs = {3e-4, 1e-4, 3e-5}) {
  std::vector<SweepEntry> out;
  for (double lr : lrs) {
    cfg.lr = lr;
    out.push_back({lr, train(cfg, task)});
  }
  std::stable_sort(out.begin(), out.end(), [](const SweepEntry& a, const SweepEntry& b) {
    if (a.result.diverged != b.result.diverged) return !a.result.diverged;
    return a.result.final_eval_loss < b.result.final_eval_loss;
  });
  return out;
}

// Central-difference check of the whole model gradient on one batch.
// Returns the worst per-tensor relative error.
inline double model_gradient_check(TinyModel& model, const Batch& b, double step = 1e-5) {
  TinyModel grad = zeros_like(model);
  batch_loss(model, b, &grad);
  auto ps = model.params();
  auto gs = grad.params();
  double worst = 0.0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    Tensor<double> fd(ps[i]->shape());
    for (std::size_t j = 0; j < ps[i]->size(); ++j) {
      const double keep = (*ps[i])[j];
      (*ps[i])[j] = keep + step;
      const double up = batch_loss(model, b).loss;
      (*ps[i])[j] = keep - step;
      const double down = batch_loss(model, b).loss;
      (*ps[i])[j] = keep;
      fd[j] = (up - down) / (2.0 * step);
    }
    worst = std::max(worst, relative_error(*gs[i], fd));
  }
  return worst;
}

}  // namespace seqmix
