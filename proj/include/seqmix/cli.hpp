#pragma once

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "seqmix/checks.hpp"
#include "seqmix/harness.hpp"

namespace seqmix::cli {

inline constexpr int kExitPass = 0;
inline constexpr int kExitFail = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitError = 3;

struct UsageError : Error {
  using Error::Error;
};

// Every option accepted by flag or config file, with its meaning.
inline const std::vector<std::pair<std::string, std::string>>& option_table() {
  static const std::vector<std::pair<std::string, std::string>> table = {
      {"preset", "variant preset (linear, mamba2, mamba2s, twomamba, twomamba_e, softmax, all)"},
      {"heads", "number of heads"},
      {"seqlen", "sequence length N"},
      {"dhead", "head dimension"},
      {"seed", "random seed (default from SEQMIX_SEED, else 0)"},
      {"precision", "f64 or f32 (f32 only for bench and memcurve)"},
      {"out", "CSV output path (train: run directory)"},
      {"block", "online-max block size, 0 = whole cache"},
      {"kernel", "gradient kernel or all"},
      {"d", "head dimension for memcurve"},
      {"nmax", "largest N for memcurve"},
      {"task", "copy or assoc_recall"},
      {"steps", "training steps"},
      {"instances", "random instances per kernel (gradcheck)"},
      {"seeds", "number of consecutive seeds (equivalence)"},
      {"bytes", "memcurve: report bytes instead of elements (0/1)"},
      {"lr", "learning rate"},
      {"vocab", "vocabulary size"},
      {"layers", "model layers"},
      {"pairs", "key/value pairs for assoc_recall"},
      {"batch", "training batch size"},
      {"eval_every", "evaluation interval in steps"},
      {"eval_batch", "evaluation batch size"},
      {"warmup", "warmup steps, 0 = 5% of steps"},
      {"optimizer", "adamw or sgd"},
      {"min_acc", "train: required final eval accuracy (strictly greater)"},
      {"repeats", "bench: timed calls per path"},
  };
  return table;
}

inline bool known_option(const std::string& k) {
  for (const auto& [name, _] : option_table())
    if (name == k) return true;
  return false;
}

inline std::string valid_options() {
  std::string s;
  for (const auto& [name, _] : option_table()) s += (s.empty() ? "" : ", ") + name;
  return s;
}

// key=value lines; '#' starts a comment, blank lines are skipped.
inline std::map<std::string, std::string> parse_config_text(std::istream& in,
                                                            const std::string& origin) {
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError(origin + ":" + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    if (!known_option(key))
      throw UsageError(origin + ":" + std::to_string(lineno) + ": unknown key '" + key +
                       "'; valid keys: " + valid_options());
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot open config file '" + path + "'");
  return parse_config_text(f, path);
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    x = std::stoull(v, &pos, 10);
  } catch (const std::exception&) {
    pos = std::string::npos;
  }
  if (pos != v.size()) throw UsageError("invalid non-negative integer '" + v + "' for " + key);
  return x;
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = std::string::npos;
  }
  if (pos != v.size() || !std::isfinite(x)) throw UsageError("invalid number '" + v + "' for " + key);
  return x;
}

// Merged view: built-in defaults < SEQMIX_SEED < config file < flags.
class Options {
 public:
  explicit Options(std::map<std::string, std::string> kv) : kv_(std::move(kv)) {}

  bool has(const std::string& k) const { return kv_.count(k) != 0; }
  std::string str(const std::string& k, const std::string& def) const {
    auto it = kv_.find(k);
    return it == kv_.end() ? def : it->second;
  }
  std::uint64_t u64(const std::string& k, std::uint64_t def) const {
    return has(k) ? parse_u64(k, kv_.at(k)) : def;
  }
  std::size_t positive(const std::string& k, std::size_t def) const {
    const auto v = u64(k, def);
    if (v == 0) throw UsageError(k + " must be positive");
    return static_cast<std::size_t>(v);
  }
  double real(const std::string& k, double def) const {
    return has(k) ? parse_double(k, kv_.at(k)) : def;
  }
  const std::map<std::string, std::string>& all() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

inline std::vector<std::string> preset_selection(const Options& o, const std::string& def) {
  const std::string p = o.str("preset", def);
  if (p == "all") return {kPresetNames.begin(), kPresetNames.end()};
  try {
    (void)preset(p);
  } catch (const ConfigError& e) {
    throw UsageError(std::string(e.what()) + ", all");
  }
  return {p};
}

inline std::string precision_of(const Options& o, bool f32_allowed) {
  const std::string p = o.str("precision", "f64");
  if (p != "f64" && p != "f32")
    throw UsageError("invalid precision '" + p + "'; valid: f64, f32");
  if (p == "f32" && !f32_allowed) throw UsageError("precision f32 is only supported by bench and memcurve");
  return p;
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << std::scientific << v;
  return os.str();
}

struct Summary {
  std::size_t checks = 0, failed = 0;
  std::vector<std::pair<std::string, std::string>> extra;
  void record(bool ok) {
    ++checks;
    if (!ok) ++failed;
  }
  bool pass() const { return failed == 0; }
  void write(std::ostream& os) const {
    os << "summary,status=" << (pass() ? "pass" : "fail") << ",checks=" << checks
       << ",failed=" << failed;
    for (const auto& [k, v] : extra) os << ',' << k << '=' << v;
    os << '\n';
  }
};

// ------------------------------------------------------------ subcommands

inline Summary cmd_gradcheck(const Options& o, std::ostream& os) {
  precision_of(o, false);
  const std::string which = o.str("kernel", "all");
  std::vector<KernelId> kernels;
  if (which == "all") {
    for (std::size_t i = 0; i < kKernelNames.size(); ++i) kernels.push_back(static_cast<KernelId>(i));
  } else {
    try {
      kernels.push_back(parse_kernel(which));
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
  }
  const std::size_t heads = o.positive("heads", 2), n = o.positive("seqlen", 16);
  const std::size_t d = o.positive("dhead", 8), instances = o.positive("instances", 20);
  const std::uint64_t seed = o.u64("seed", 0);
  Summary sum;
  double worst = 0.0;
  os << "kernel,instance,rel_dq,rel_dk,rel_dv,rel_da,pass\n";
  for (KernelId k : kernels) {
    std::seed_seq ss{seed, static_cast<std::uint64_t>(k)};
    std::mt19937_64 rng(ss);
    for (std::size_t i = 0; i < instances; ++i) {
      const GradCheckResult r = gradcheck_instance(k, heads, n, d, rng, i);
      os << kernel_name(k) << ',' << i << ',' << fmt(r.rel_dq) << ',' << fmt(r.rel_dk) << ','
         << fmt(r.rel_dv) << ',' << (r.rel_da ? fmt(*r.rel_da) : "") << ','
         << (r.pass() ? 1 : 0) << '\n';
      sum.record(r.pass());
      worst = std::max(worst, r.worst());
    }
  }
  sum.extra = {{"worst_rel", fmt(worst)}, {"tolerance", fmt(kGradTolerance)}};
  return sum;
}

inline Summary cmd_equivalence(const Options& o, std::ostream& os) {
  precision_of(o, false);
  const auto presets = preset_selection(o, "twomamba");
  const std::size_t heads = o.positive("heads", 2), n = o.positive("seqlen", 256);
  const std::size_t d = o.positive("dhead", 16), seeds = o.positive("seeds", 1);
  const std::size_t block = static_cast<std::size_t>(o.u64("block", 0));
  const std::uint64_t seed = o.u64("seed", 0);
  Summary sum;
  double worst = 0.0;
  os << "preset,seed,token,max_abs_dev,rel_dev,pass\n";
  for (const auto& p : presets)
    for (std::uint64_t s = seed; s < seed + seeds; ++s) {
      const EquivalenceResult r = equivalence_run<double>(preset(p), heads, n, d, s, block);
      for (const auto& t : r.tokens) {
        const bool ok = t.rel < kEquivalenceTolerance;
        os << p << ',' << s << ',' << t.token << ',' << fmt(t.max_abs) << ',' << fmt(t.rel) << ','
           << (ok ? 1 : 0) << '\n';
        sum.record(ok);
      }
      worst = std::max(worst, r.worst_rel);
    }
  sum.extra = {{"worst_rel", fmt(worst)}, {"tolerance", fmt(kEquivalenceTolerance)}};
  return sum;
}

inline Summary cmd_memcurve(const Options& o, std::ostream& os) {
  const std::uint64_t d = o.positive("d", 64), nmax = o.positive("nmax", 2048);
  const bool bytes = o.u64("bytes", 0) != 0;
  const std::string precision = precision_of(o, true);
  const MemoryCheckResult r = memory_check(d, nmax, o.u64("seed", 0));
  write_memcurve_csv(os, r.rows, bytes ? (precision == "f32" ? 4 : 8) : 1);
  Summary sum;
  sum.record(r.mismatched_rows == 0);
  sum.record(r.first_exceedance_n == std::optional<std::uint64_t>(r.crossover) ||
             (!r.first_exceedance_n && r.crossover > nmax));
  sum.extra = {{"crossover", std::to_string(r.crossover)},
               {"first_exceedance",
                r.first_exceedance_n ? std::to_string(*r.first_exceedance_n) : "none"},
               {"mismatched_rows", std::to_string(r.mismatched_rows)}};
  return sum;
}

inline TinyModelConfig train_config(const Options& o, const std::string& preset_name) {
  TinyModelConfig c;
  c.preset_name = preset_name;
  c.variant = preset(preset_name);
  c.n_heads = o.positive("heads", 2);
  c.d_head = o.positive("dhead", 32);
  c.d_model = c.n_heads * c.d_head;
  c.n_layers = o.positive("layers", 2);
  c.vocab = o.positive("vocab", 32);
  c.seq_len = o.positive("seqlen", 64);
  c.total_steps = o.positive("steps", 2000);
  c.lr = o.real("lr", 1e-3);
  c.batch = o.positive("batch", 16);
  c.eval_every = static_cast<std::size_t>(o.u64("eval_every", 100));
  c.eval_batch = o.positive("eval_batch", 256);
  c.warmup_steps = static_cast<std::size_t>(o.u64("warmup", 0));
  c.seed = o.u64("seed", 0);
  const std::string opt = o.str("optimizer", "adamw");
  if (opt == "adamw")
    c.optimizer = OptimizerKind::adamw;
  else if (opt == "sgd")
    c.optimizer = OptimizerKind::sgd;
  else
    throw UsageError("invalid optimizer '" + opt + "'; valid: adamw, sgd");
  return c;
}

inline Summary cmd_train(const Options& o, std::ostream& os) {
  precision_of(o, false);
  const auto presets = preset_selection(o, "twomamba");
  if (presets.size() != 1) throw UsageError("train takes a single preset");
  const TinyModelConfig cfg = train_config(o, presets.front());
  SyntheticTask task;
  try {
    task.kind = parse_task(o.str("task", "assoc_recall"));
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  task.vocab = cfg.vocab;
  task.seq_len = cfg.seq_len;
  task.n_pairs = o.positive("pairs", 8);
  task.seed = cfg.seed + 1;
  const std::filesystem::path dir = o.str("out", "run");
  const TrainResult r = train(cfg, task, dir);
  write_loss_csv(os, r.curve);
  Summary sum;
  sum.record(!r.diverged);
  if (o.has("min_acc")) sum.record(r.final_eval_acc > o.real("min_acc", 0.0));
  sum.extra = {{"steps", std::to_string(r.steps_run)},
               {"final_eval_loss", fmt(r.final_eval_loss)},
               {"final_eval_acc", fmt(r.final_eval_acc)},
               {"diverged", r.diverged ? "1" : "0"},
               {"run_dir", dir.string()}};
  return sum;
}

template <typename T>
double bench_one(const std::string& p, std::size_t heads, std::size_t n, std::size_t d,
                 std::uint64_t seed, std::size_t block, std::size_t repeats, std::ostream& os,
                 const char* precision) {
  const VariantConfig cfg = preset(p);
  std::mt19937_64 rng(seed);
  const auto w = init_block_weights<T>(cfg, heads * d, heads, d, rng);
  const Tensor<T> h = random_normal<T>({n, heads * d}, rng);
  Tensor<T> quad, rec;
  auto time = [&](auto&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t r = 0; r < repeats; ++r) fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / static_cast<double>(repeats);
  };
  const double tq = time([&] { quad = variant_forward(h, cfg, w); });
  const double ts = time([&] { rec = run_stateful(h, cfg, w, block).out; });
  const double dev = compare_rows(quad, rec).worst_rel;
  for (auto [path, ms] : {std::pair{"quadratic", tq}, std::pair{"stateful", ts}})
    os << p << ',' << precision << ',' << path << ',' << n << ',' << heads << ',' << d << ','
       << std::fixed << std::setprecision(3) << ms << std::defaultfloat << ',' << fmt(dev) << '\n';
  return dev;
}

inline Summary cmd_bench(const Options& o, std::ostream& os) {
  const std::string precision = precision_of(o, true);
  const auto presets = preset_selection(o, "all");
  const std::size_t heads = o.positive("heads", 2), n = o.positive("seqlen", 256);
  const std::size_t d = o.positive("dhead", 16), repeats = o.positive("repeats", 3);
  const std::size_t block = static_cast<std::size_t>(o.u64("block", 0));
  const std::uint64_t seed = o.u64("seed", 0);
  // f32 deviations are reported, not gated: rows whose scores nearly cancel
  // lose most f32 digits on the feature-map path.
  const bool gated = precision == "f64";
  Summary sum;
  os << "preset,precision,path,seqlen,heads,dhead,ms_per_call,rel_dev\n";
  for (const auto& p : presets) {
    const double dev =
        precision == "f32"
            ? bench_one<float>(p, heads, n, d, seed, block, repeats, os, "f32")
            : bench_one<double>(p, heads, n, d, seed, block, repeats, os, "f64");
    sum.record(gated ? dev < kEquivalenceTolerance : std::isfinite(dev));
  }
  sum.extra = {{"tolerance", gated ? fmt(kEquivalenceTolerance) : std::string("none")}};
  return sum;
}

inline Summary cmd_identitycheck(const Options& o, std::ostream& os) {
  precision_of(o, false);
  Summary sum;
  os << "check,value,tolerance,pass\n";
  auto row = [&](const std::string& name, double value, double tol) {
    const bool ok = value < tol;
    os << name << ',' << fmt(value) << ',' << fmt(tol) << ',' << (ok ? 1 : 0) << '\n';
    sum.record(ok);
  };
  row("logsigmoid_vs_neg_softplus_neg", logsigmoid_identity_deviation(), kIdentityTolerance);
  row("softplus_inverse_log2", std::abs(softplus_inverse(std::log(2.0))), 1e-12);
  for (double y : {kDtMin, kDtMax})
    row("softplus_roundtrip_" + std::to_string(y).substr(0, 5),
        std::abs(softplus(softplus_inverse(y)) - y), 1e-10);
  return sum;
}

// ------------------------------------------------------------- dispatch

inline std::map<std::string, std::string> base_options() {
  std::map<std::string, std::string> kv;
  if (const char* env = std::getenv("SEQMIX_SEED"); env && *env) {
    parse_u64("SEQMIX_SEED", env);
    kv["seed"] = env;
  }
  return kv;
}

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  CLI::App app{"seqmix: attention-variant verification toolkit"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  std::string config_path;
  app.add_option("--config", config_path, "key=value config file; flags override it");
  std::map<std::string, std::string> flag_values;
  std::map<std::string, CLI::Option*> flag_opts;
  for (const auto& [name, help] : option_table())
    flag_opts[name] = app.add_option("--" + name, flag_values[name], help);

  const std::vector<std::pair<std::string, std::string>> subs = {
      {"gradcheck", "analytic kernel gradients vs finite differences"},
      {"equivalence", "quadratic vs stateful outputs per token"},
      {"memcurve", "KV-cache vs second-order state memory, closed form and measured"},
      {"train", "train a tiny model on a synthetic task"},
      {"bench", "time quadratic and stateful paths"},
      {"identitycheck", "log-sigmoid / softplus identity and softplus inverse"}};
  for (const auto& [name, help] : subs) app.add_subcommand(name, help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  try {
    std::map<std::string, std::string> merged = base_options();
    if (!config_path.empty())
      for (auto& [k, v] : read_config_file(config_path)) merged[k] = v;
    for (auto& [name, opt] : flag_opts)
      if (opt->count() > 0) merged[name] = flag_values[name];
    const Options opts(merged);

    const std::string sub = app.get_subcommands().front()->get_name();
    std::unique_ptr<std::ofstream> file;
    std::ostream* os = &out;
    if (sub != "train" && opts.has("out")) {
      file = std::make_unique<std::ofstream>(opts.str("out", ""));
      if (!*file) throw UsageError("cannot open output '" + opts.str("out", "") + "'");
      os = file.get();
    }
    Summary s;
    if (sub == "gradcheck") s = cmd_gradcheck(opts, *os);
    else if (sub == "equivalence") s = cmd_equivalence(opts, *os);
    else if (sub == "memcurve") s = cmd_memcurve(opts, *os);
    else if (sub == "train") s = cmd_train(opts, *os);
    else if (sub == "bench") s = cmd_bench(opts, *os);
    else s = cmd_identitycheck(opts, *os);
    s.write(*os);
    os->flush();
    return s.pass() ? kExitPass : kExitFail;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitError;
  }
}

}  // namespace seqmix::cli
