#pragma once

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>

#include "nwcrf/crf_classic.hpp"
#include "nwcrf/netpbm.hpp"
#include "nwcrf/train.hpp"

namespace nwcrf::cli {

// Exit codes partition failure causes: 2 config/input, 3 numeric,
// 4 checkpoint, 5 property-check.
constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitCheckpoint = 4;
constexpr int kExitProperty = 5;

namespace detail {

inline TrainSetup build_setup(const std::string& config_path,
                              const std::vector<std::string>& overrides, int64_t steps_flag,
                              int64_t seed_flag) {
  TrainSetup setup;
  if (!config_path.empty())
    for (const auto& [k, v] : parse_kv_file(config_path)) apply_setup_kv(setup, k, v);
  for (const std::string& item : overrides) {
    size_t eq = item.find('=');
    if (eq == std::string::npos)
      throw ConfigError("override `" + item + "`: expected key=value");
    std::string key = trim(item.substr(0, eq));
    std::string value = trim(item.substr(eq + 1));
    try {
      apply_setup_kv(setup, key, value);
    } catch (const ConfigError&) {
      if (key.find('.') != std::string::npos) throw;
      apply_setup_kv(setup, "train." + key, value);  // `steps=10` means `train.steps=10`
    }
  }
  if (steps_flag >= 0) setup.train.steps = steps_flag;
  if (seed_flag >= 0) setup.model.seed = static_cast<uint64_t>(seed_flag);
  setup.validate();
  return setup;
}

inline std::vector<DepthSample> load_dataset(const std::string& spec) {
  std::vector<DepthSample> samples;
  if (spec.rfind("synth:", 0) == 0) {
    int64_t count = 50, size = 64;
    uint64_t seed = 1000000;
    std::istringstream is(spec.substr(6));
    std::string item;
    while (std::getline(is, item, ',')) {
      size_t eq = item.find('=');
      if (eq == std::string::npos) throw ConfigError("bad synth spec item `" + item + "`");
      std::string k = trim(item.substr(0, eq)), v = trim(item.substr(eq + 1));
      if (k == "count") count = std::stoll(v);
      else if (k == "seed") seed = std::stoull(v);
      else if (k == "size") size = std::stoll(v);
      else throw ConfigError("unknown synth spec key `" + k + "`");
    }
    if (count < 1) throw ConfigError("empty dataset: synth count must be >= 1");
    for (int64_t i = 0; i < count; ++i)
      samples.push_back(synth_scene(seed + static_cast<uint64_t>(i), size, size));
    return samples;
  }
  std::filesystem::path dir(spec);
  std::ifstream index(dir / "index.txt");
  if (!index) throw ConfigError("dataset " + spec + ": cannot open index.txt");
  std::string line;
  while (std::getline(index, line)) {
    line = trim(line);
    if (line.empty()) continue;
    size_t tab = line.find('\t');
    if (tab == std::string::npos)
      throw ConfigError("dataset index line `" + line + "`: expected image<TAB>depth");
    DepthSample s;
    s.image = read_ppm((dir / trim(line.substr(0, tab))).string());
    auto [depth, valid] = read_pgm16((dir / trim(line.substr(tab + 1))).string());
    s.depth = std::move(depth);
    s.valid = std::move(valid);
    if (s.image.extent(0) != s.depth.extent(0) || s.image.extent(1) != s.depth.extent(1))
      throw ConfigError("dataset sample extents disagree: image " + extents_str(s.image.extents()) +
                        " vs depth " + extents_str(s.depth.extents()));
    samples.push_back(std::move(s));
  }
  if (samples.empty()) throw ConfigError("empty dataset: " + spec);
  return samples;
}

inline void write_metrics_csv(const std::string& path, const std::vector<EvalLog>& evals) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot open " + path + " for writing");
  out << "# sq_rel uses the standard definition mean((pred-gt)^2 / gt)\n";
  out << metrics_csv_header() << "\n";
  for (const EvalLog& e : evals) {
    out << "# step=" << e.step << "\n";
    out << metrics_csv_row(e.metrics) << "\n";
  }
}

inline int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
                     int64_t steps_flag, int64_t seed_flag, const std::string& out_dir) {
  TrainSetup setup = build_setup(config_path, overrides, steps_flag, seed_flag);
  std::filesystem::create_directories(out_dir);
  std::filesystem::path dir(out_dir);

  std::ofstream loss_csv(dir / "loss.csv", std::ios::trunc);
  if (!loss_csv) throw ConfigError("cannot open " + (dir / "loss.csv").string());
  loss_csv << "step,lr,loss\n";

  TrainResult result = train(
      setup,
      [&](const StepLog& log) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%lld,%.8g,%.10g", static_cast<long long>(log.step),
                      log.lr, log.loss);
        loss_csv << buf << "\n";
        if (log.step % 50 == 0) {
          std::cout << "step " << log.step << "  lr " << log.lr << "  loss " << log.loss << "\n";
          std::cout.flush();
        }
      },
      [&](const EvalLog& ev) {
        std::cout << "eval @ step " << ev.step << "  abs_rel " << ev.metrics.abs_rel << "  rmse "
                  << ev.metrics.rmse << "  d1 " << ev.metrics.d1 << "\n";
        std::cout.flush();
      });

  write_metrics_csv((dir / "metrics.csv").string(), result.eval_log);
  save_checkpoint((dir / "checkpoint.nwcf").string(),
                  make_checkpoint(setup.model, result.params, result.steps, &result.adam));
  std::cout << "wrote " << (dir / "checkpoint.nwcf").string() << "\n";
  return kExitOk;
}

inline int cmd_eval(const std::string& ckpt_path, const std::string& data_spec, double cap,
                    const std::string& out_path) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  ModelParams params = params_from_checkpoint(ckpt);
  std::vector<DepthSample> samples = load_dataset(data_spec);
  double effective_cap = cap > 0.0 ? cap : ckpt.config.max_depth;
  MetricsReport report = evaluate_dataset(params, ckpt.config, samples, effective_cap);
  std::cout << metrics_csv_header() << "\n" << metrics_csv_row(report) << "\n";
  if (!out_path.empty()) {
    std::vector<EvalLog> one{{ckpt.step, report}};
    write_metrics_csv(out_path, one);
  }
  return kExitOk;
}

inline int cmd_infer(const std::string& ckpt_path, const std::string& image_path,
                     const std::string& out_path) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  ModelParams params = params_from_checkpoint(ckpt);
  Tensor image = read_ppm(image_path);
  int64_t h = image.extent(0), w = image.extent(1);
  int64_t ph = (h + 31) / 32 * 32, pw = (w + 31) / 32 * 32;
  int64_t top = (ph - h) / 2, left = (pw - w) / 2;
  Tensor padded({ph, pw, 3});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c) padded.at(y + top, x + left, c) = image.at(y, x, c);

  Tape tape;
  ModelVars vars = lift(tape, params);
  Var pred = forward(tape.constant(padded), vars, ckpt.config);
  Tensor full = upsample_nearest(tape.value(pred), ph, pw);
  Tensor depth({h, w});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) depth.at(y, x) = full.at(y + top, x + left);

  int64_t saturated = write_pgm16(out_path, depth, nullptr);
  write_depth_scale_sidecar(out_path);
  if (saturated > 0)
    std::cerr << "warning: " << saturated << " depth values beyond 255.99 m saturated at 65535\n";
  std::cout << "wrote " << out_path << " (" << w << "x" << h << ", 256 units per meter)\n";
  return kExitOk;
}

inline int cmd_synth(const std::string& out_dir, int64_t count, uint64_t seed, int64_t size) {
  if (count < 1) throw ConfigError("synth: count must be >= 1");
  std::filesystem::create_directories(out_dir);
  std::filesystem::path dir(out_dir);
  std::ofstream index(dir / "index.txt", std::ios::trunc);
  if (!index) throw ConfigError("cannot open " + (dir / "index.txt").string());
  for (int64_t i = 0; i < count; ++i) {
    DepthSample s = synth_scene(seed + static_cast<uint64_t>(i), size, size);
    std::string image_name = "sample" + std::to_string(i) + ".ppm";
    std::string depth_name = "sample" + std::to_string(i) + ".pgm";
    write_ppm((dir / image_name).string(), s.image);
    write_pgm16((dir / depth_name).string(), s.depth, &s.valid);
    write_depth_scale_sidecar((dir / depth_name).string());
    index << image_name << "\t" << depth_name << "\n";
  }
  std::cout << "wrote " << count << " samples to " << out_dir << "\n";
  return kExitOk;
}

// ---- property checks (the `check` subcommand)

inline bool report(const char* name, bool ok, const std::string& detail = "") {
  std::cout << (ok ? "[ok]   " : "[FAIL] ") << name;
  if (!detail.empty()) std::cout << "  " << detail;
  std::cout << "\n";
  return ok;
}

// Plain-loop dense all-pairs attention over an n x n grid (single window),
// kept independent of the windowed implementation it checks.
inline Tensor dense_attention_check(const Tensor& f, const Tensor& x, const CrfStageParams& p,
                                    int64_t grid, const CrfStageConfig& cfg) {
  int64_t n = grid * grid, c = cfg.feat_channels, dh = cfg.head_dim, span = 2 * grid - 1;
  Tensor fn = f;
  if (cfg.norm_features)
    for (int64_t i = 0; i < n; ++i) {
      double mean = 0, var = 0;
      for (int64_t j = 0; j < c; ++j) mean += fn.at(i, j);
      mean /= static_cast<double>(c);
      for (int64_t j = 0; j < c; ++j) var += (fn.at(i, j) - mean) * (fn.at(i, j) - mean);
      var /= static_cast<double>(c);
      double inv = 1.0 / std::sqrt(var + 1e-5);
      for (int64_t j = 0; j < c; ++j) fn.at(i, j) = (fn.at(i, j) - mean) * inv;
    }
  Tensor out({n, cfg.pred_channels()});
  for (int64_t h = 0; h < cfg.heads; ++h) {
    Tensor q({n, dh}), k({n, dh});
    for (int64_t i = 0; i < n; ++i)
      for (int64_t d = 0; d < dh; ++d) {
        double qs = 0, ks = 0;
        for (int64_t j = 0; j < c; ++j) {
          qs += fn.at(i, j) * p.query_weight.at(j, h * dh + d);
          ks += fn.at(i, j) * p.key_weight.at(j, h * dh + d);
        }
        q.at(i, d) = qs;
        k.at(i, d) = ks;
      }
    double sc = cfg.scale_logits ? 1.0 / std::sqrt(static_cast<double>(dh)) : 1.0;
    for (int64_t a = 0; a < n; ++a) {
      std::vector<double> logit(static_cast<size_t>(n));
      double mx = -1e300;
      for (int64_t b = 0; b < n; ++b) {
        double dot = 0;
        for (int64_t d = 0; d < dh; ++d) dot += q.at(a, d) * k.at(b, d);
        int64_t dy = b / grid - a / grid + grid - 1, dx = b % grid - a % grid + grid - 1;
        logit[static_cast<size_t>(b)] = dot * sc + p.bias_table.at(dy * span + dx, h);
        mx = std::max(mx, logit[static_cast<size_t>(b)]);
      }
      double sum = 0;
      for (double& l : logit) {
        l = std::exp(l - mx);
        sum += l;
      }
      for (int64_t d = 0; d < dh; ++d) {
        double acc = 0;
        for (int64_t b = 0; b < n; ++b)
          acc += logit[static_cast<size_t>(b)] / sum * x.at(b, h * dh + d);
        out.at(a, h * dh + d) = acc;
      }
    }
  }
  return out;
}

// d(output at node a)/d(prediction at node b) is the attention weight between
// them; probes positivity through the public gradient path.
inline bool positive_attention_between(const Tensor& f, const Tensor& x,
                                       const CrfStageParams& params, const WindowPartition& part,
                                       const CrfStageConfig& cfg, int64_t a, int64_t b) {
  Tape t;
  Var xv = t.leaf(x);
  Var f3 = t.constant(f.reshaped({part.rows, part.cols, cfg.feat_channels}));
  Var out = attention_stage(f3, reshape(xv, {part.rows, part.cols, cfg.pred_channels()}), part,
                            lift(t, params), cfg);
  Var row = gather_rows(reshape(out, {part.rows * part.cols, cfg.pred_channels()}), {a});
  t.backward(sum(row));
  return t.grad(xv).at(b, 0) > 0.0;
}

inline int cmd_check(int64_t rows, int64_t cols, int64_t n) {
  if (rows < 1 || cols < 1 || rows > 12 || cols > 12)
    throw ContractError("check: extents must lie in 1..12");
  if (n < 1 || n > std::min(rows, cols))
    throw ContractError("check: window " + std::to_string(n) + " exceeds grid (" +
                        std::to_string(rows) + "," + std::to_string(cols) + ")");
  if (rows % n != 0 || cols % n != 0)
    throw ContractError("check: window must tile the grid exactly for edge accounting");
  bool all_ok = true;
  Rng rng(20240001);

  // dense equivalence on an n x n grid fully covered by one window
  {
    CrfStageConfig cfg;
    cfg.heads = 2;
    cfg.head_dim = 4;
    cfg.window = n;
    cfg.feat_channels = 6;
    CrfStageParams params = init_crf_stage(cfg, 99, "check");
    for (int64_t i = 0; i < params.bias_table.numel(); ++i)
      params.bias_table[i] = rng.uniform(-0.5, 0.5);
    Tensor f({n * n, 6}), x({n * n, cfg.pred_channels()});
    for (int64_t i = 0; i < f.numel(); ++i) f[i] = rng.uniform(-1, 1);
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform(-1, 1);

    Tape t;
    WindowPartition whole = partition_windows(n, n, n, false);
    Var out = attention_stage(t.constant(f.reshaped({n, n, 6})),
                              t.constant(x.reshaped({n, n, cfg.pred_channels()})), whole,
                              lift(t, params), cfg);
    Tensor ref = dense_attention_check(f, x, params, n, cfg);
    double diff = max_abs_diff(t.value(out).reshaped({n * n, cfg.pred_channels()}), ref);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "max |diff| = %.3g", diff);
    all_ok &= report("dense-equivalence (whole-window attention vs all-pairs)", diff < 1e-10, buf);
  }

  // ordered-edge counts: closed forms vs brute force vs measured logits
  {
    int64_t fc = count_pairwise_edges(rows, cols, n, true);
    int64_t win = count_pairwise_edges(rows, cols, n, false);
    WindowPartition part = partition_windows(rows, cols, n, false);
    int64_t brute = 0;
    for (const auto& nodes : part.window_nodes)
      for (int64_t a : nodes)
        for (int64_t b : nodes)
          if (a >= 0 && b >= 0 && a != b) ++brute;

    CrfStageConfig cfg;
    cfg.heads = 1;
    cfg.head_dim = 2;
    cfg.window = n;
    cfg.feat_channels = 3;
    CrfStageParams params = init_crf_stage(cfg, 7, "count");
    Tape t;
    AttentionStats stats;
    Tensor f({rows, cols, 3}), x({rows, cols, 2});
    attention_stage(t.constant(f), t.constant(x), part, lift(t, params), cfg, &stats);

    std::cout << "    hw(hw-1) fully connected = " << fc << "\n";
    std::cout << "    hw(N^2-1) windowed       = " << win << " (brute force " << brute << ")\n";
    std::cout << "    measured logit entries   = " << stats.logit_entries << " (pairs + self = "
              << win + rows * cols << ")\n";
    all_ok &= report("edge accounting", win == brute && stats.logit_entries == win + rows * cols);
  }

  // every 4-adjacent pair shares a window in one of the two tilings and
  // exchanges strictly positive attention weight there
  {
    WindowPartition reg = partition_windows(rows, cols, n, false);
    WindowPartition shf = partition_windows(rows, cols, n, true);
    CrfStageConfig cfg;
    cfg.heads = 1;
    cfg.head_dim = 2;
    cfg.window = n;
    cfg.feat_channels = 3;
    CrfStageParams params = init_crf_stage(cfg, 3, "shift");
    Tensor f({rows * cols, 3}), x({rows * cols, 2});
    for (int64_t i = 0; i < f.numel(); ++i) f[i] = rng.uniform(-1, 1);
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform(-1, 1);
    auto same_window = [n](const WindowPartition& p, int64_t a, int64_t b) {
      return p.scatter_index[static_cast<size_t>(a)] / (n * n) ==
             p.scatter_index[static_cast<size_t>(b)] / (n * n);
    };
    bool ok = true;
    for (int64_t y = 0; y < rows && ok; ++y)
      for (int64_t x0 = 0; x0 < cols && ok; ++x0)
        for (auto [dy, dx] : {std::pair<int64_t, int64_t>{0, 1}, {1, 0}}) {
          if (y + dy >= rows || x0 + dx >= cols) continue;
          int64_t a = y * cols + x0, b = (y + dy) * cols + (x0 + dx);
          bool in_reg = same_window(reg, a, b);
          bool in_shf = same_window(shf, a, b);
          if (!in_reg && !in_shf) {
            ok = false;
            break;
          }
          const WindowPartition& where = in_reg ? reg : shf;
          if (!positive_attention_between(f, x, params, where, cfg, a, b)) {
            ok = false;
            break;
          }
        }
    all_ok &= report("shift connectivity (adjacent pairs joined, positive weight)", ok);
  }

  // finite-difference gradient spot checks through one CRF stage
  {
    CrfStageConfig cfg;
    cfg.heads = 1;
    cfg.head_dim = 2;
    cfg.window = n;
    cfg.feat_channels = 3;
    CrfStageParams params = init_crf_stage(cfg, 11, "grad");
    Tensor f({n, n, 3}), x({n, n, 2});
    for (int64_t i = 0; i < f.numel(); ++i) f[i] = rng.uniform(-1, 1);
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform(-1, 1);
    WindowPartition part = partition_windows(n, n, n, false);

    auto loss_value = [&](const CrfStageParams& p) {
      Tape t;
      Var out = crf_stage_forward(t.constant(f), t.constant(x), part, lift(t, p), cfg);
      return t.value(sum(mul(out, out)))[0];
    };
    Tape t;
    CrfStageVars vars = lift(t, params);
    Var out = crf_stage_forward(t.constant(f), t.constant(x), part, vars, cfg);
    t.backward(sum(mul(out, out)));

    double max_rel = 0.0;
    std::vector<std::pair<Tensor*, Var>> pairs{
        {&params.query_weight, vars.query_weight}, {&params.key_weight, vars.key_weight},
        {&params.bias_table, vars.bias_table},     {&params.unary.kernel, vars.unary.kernel},
        {&params.opt1.weight, vars.opt1.weight},   {&params.opt2.weight, vars.opt2.weight}};
    for (auto& [tensor, var] : pairs) {
      for (int probe = 0; probe < 3; ++probe) {
        int64_t idx = rng.uniform_int(0, tensor->numel() - 1);
        double save = (*tensor)[idx];
        const double step = 1e-5;
        (*tensor)[idx] = save + step;
        double up = loss_value(params);
        (*tensor)[idx] = save - step;
        double down = loss_value(params);
        (*tensor)[idx] = save;
        double fd = (up - down) / (2 * step);
        double ad = t.grad(var)[idx];
        max_rel = std::max(max_rel, std::abs(ad - fd) / std::max(1.0, std::abs(fd)));
      }
    }
    char buf[64];
    std::snprintf(buf, sizeof(buf), "max rel err = %.3g", max_rel);
    all_ok &= report("gradient spot checks (central differences)", max_rel < 1e-4, buf);
  }

  return all_ok ? kExitOk : kExitProperty;
}

}  // namespace detail

inline int run(std::vector<std::string> args) {
  CLI::App app{"neural window fully-connected CRFs depth decoder"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", ckpt_path, data_spec, image_path, out_path;
  std::vector<std::string> overrides;
  int64_t steps_flag = -1, seed_flag = -1;
  double cap = 0.0;
  int64_t rows = 8, cols = 8, window = 8;
  int64_t count = 50, size = 64;
  uint64_t synth_seed = 1000000;

  CLI::App* train_cmd = app.add_subcommand("train", "train on procedural scenes");
  train_cmd->add_option("--config", config_path, "config file (key = value lines)");
  train_cmd->add_option("--override", overrides, "key=value settings overriding the file");
  train_cmd->add_option("--steps", steps_flag, "step count (overrides config)");
  train_cmd->add_option("--seed", seed_flag, "seed (overrides config)");
  train_cmd->add_option("--out", out_dir, "output directory");

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  eval_cmd->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
  eval_cmd->add_option("--data", data_spec, "dataset dir with index.txt, or synth:count=..,seed=..,size=..")
      ->required();
  eval_cmd->add_option("--cap", cap, "depth cap in meters (default: model max depth)");
  eval_cmd->add_option("--out", out_path, "also write the metrics CSV here");

  CLI::App* infer_cmd = app.add_subcommand("infer", "predict depth for one PPM image");
  infer_cmd->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
  infer_cmd->add_option("--input", image_path, "input image (binary PPM)")->required();
  infer_cmd->add_option("--output", out_path, "output depth map (16-bit PGM)")->required();

  CLI::App* check_cmd = app.add_subcommand("check", "run the oracle and property checks");
  check_cmd->add_option("--rows", rows, "grid rows (<= 12)");
  check_cmd->add_option("--cols", cols, "grid cols (<= 12)");
  check_cmd->add_option("--window", window, "window size N");

  CLI::App* synth_cmd = app.add_subcommand("synth", "emit a synthetic dataset to disk");
  synth_cmd->add_option("--out", out_dir, "output directory")->required();
  synth_cmd->add_option("--count", count, "sample count");
  synth_cmd->add_option("--seed", synth_seed, "base seed");
  synth_cmd->add_option("--size", size, "image size (multiple of 32)");

  try {
    std::vector<const char*> argv{"nwcrf"};
    for (const std::string& a : args) argv.push_back(a.c_str());
    app.parse(static_cast<int>(argv.size()), argv.data());

    if (*train_cmd) return detail::cmd_train(config_path, overrides, steps_flag, seed_flag, out_dir);
    if (*eval_cmd) return detail::cmd_eval(ckpt_path, data_spec, cap, out_path);
    if (*infer_cmd) return detail::cmd_infer(ckpt_path, image_path, out_path);
    if (*check_cmd) return detail::cmd_check(rows, cols, window);
    if (*synth_cmd) return detail::cmd_synth(out_dir, count, synth_seed, size);
    return kExitConfig;
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitCheckpoint;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
}

}  // namespace nwcrf::cli
