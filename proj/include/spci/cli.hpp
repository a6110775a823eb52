// SPDX-License-Identifier: Apache-2.0
//
// Subcommand implementations behind the `spci` tool. Each run_* function is
// a pure function of its RunConfig and the files it names; run() maps the
// error hierarchy onto exit codes.
#pragma once

#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "spci/backbone.hpp"
#include "spci/heatmap.hpp"
#include "spci/io.hpp"
#include "spci/random.hpp"
#include "spci/spci.hpp"
#include "spci/train_toy.hpp"
#include "spci/verification/cost.hpp"
#include "spci/verification/gradcheck.hpp"

namespace spci::cli {

namespace fs = std::filesystem;

enum ExitCode : int {
  kOk = 0,
  kCheckFailed = 1,
  kConfigError = 2,
  kIoError = 3,
  kShapeError = 4,
  kDiverged = 5,
};

struct RunConfig {
  std::string subcommand;  // forward | heatmap | cost | gradcheck | train-toy
  std::string target = "backbone";  // backbone | spci
  std::string input = "checkerboard";  // SPCT path or synthetic pattern name
  std::string weights;                 // SPCI manifest (spci target)
  std::string config;                  // backbone key-value config
  std::optional<std::uint64_t> seed;
  std::string out;
  bool disable_ssg = false;
  bool disable_pfm = false;
  bool disable_cdm = false;
  std::optional<std::string> spci_at;
  std::optional<Mode> bn_mode;       // default eval; train for train-toy
  std::optional<Mode> dropout_mode;  // default eval; train for train-toy
  std::size_t channels = 8;          // spci target without weights
  std::optional<std::size_t> size;   // spatial size; 16 for spci target, 6 for gradcheck
  bool save_weights = false;
  std::size_t steps = 200;
  double lr = 0.05;
};

inline const std::vector<std::string>& synthetic_patterns() {
  static const std::vector<std::string> names{"zeros", "ones", "checkerboard", "ramp", "random"};
  return names;
}

inline bool is_synthetic(const std::string& name) {
  for (const auto& s : synthetic_patterns())
    if (s == name) return true;
  return false;
}

// checkerboard: 8x8 cells of 0/1, same in every channel. ramp: (i*W + j)/(H*W).
// random: N(0,1) from the seed.
inline Tensor<float> synthetic_input(const std::string& name, const Shape& shape,
                                     std::uint64_t seed) {
  Tensor<float> x(shape);
  Rng rng(derive_seed(seed, 7));
  for (std::size_t n = 0; n < shape.n; ++n)
    for (std::size_t c = 0; c < shape.c; ++c)
      for (std::size_t i = 0; i < shape.h; ++i)
        for (std::size_t j = 0; j < shape.w; ++j) {
          float v = 0.0f;
          if (name == "ones") {
            v = 1.0f;
          } else if (name == "checkerboard") {
            v = ((i / 8 + j / 8) % 2 == 0) ? 1.0f : 0.0f;
          } else if (name == "ramp") {
            v = static_cast<float>(static_cast<double>(i * shape.w + j) /
                                   static_cast<double>(shape.h * shape.w));
          } else if (name == "random") {
            v = static_cast<float>(rng.normal());
          } else if (name != "zeros") {
            throw ConfigError("unknown synthetic pattern '" + name + "'");
          }
          x.at(n, c, i, j) = v;
        }
  return x;
}

inline Tensor<float> resolve_input(const RunConfig& cfg, const Shape& expected,
                                   std::uint64_t seed) {
  if (is_synthetic(cfg.input)) return synthetic_input(cfg.input, expected, seed);
  Tensor<float> x = io::load_tensor<float>(cfg.input);
  if (x.c() != expected.c || x.h() != expected.h || x.w() != expected.w) {
    throw ShapeError("input " + cfg.input + " has shape " + x.shape().str() + ", expected [N," +
                     std::to_string(expected.c) + "," + std::to_string(expected.h) + "," +
                     std::to_string(expected.w) + "]");
  }
  return x;
}

inline SpciFlags flags_from(const RunConfig& cfg, SpciFlags base = {}) {
  if (cfg.disable_ssg) base.ssg = false;
  if (cfg.disable_pfm) base.pfm = false;
  if (cfg.disable_cdm) base.cdm = false;
  return base;
}

inline BackboneConfig backbone_config(const RunConfig& cfg) {
  BackboneConfig bc = cfg.config.empty() ? BackboneConfig{} : load_backbone_config(cfg.config);
  if (cfg.seed) bc.seed = *cfg.seed;
  if (cfg.spci_at) bc.spci_at = parse_spci_at(*cfg.spci_at);
  bc.flags = flags_from(cfg, bc.flags);
  validate(bc);
  return bc;
}

inline SpciParams<float> spci_params(const RunConfig& cfg) {
  SpciParams<float> p = cfg.weights.empty()
                            ? init_spci<float>(cfg.channels, cfg.channels, kDefaultReduction,
                                               kDefaultDropout, cfg.seed.value_or(0))
                            : io::load_spci<float>(cfg.weights);
  p.flags = flags_from(cfg, p.flags);
  return p;
}

struct ForwardOutput {
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  std::vector<std::pair<std::string, SpciResult<float>>> blocks;
  std::optional<SpciParams<float>> params;  // spci target only
};

inline ForwardOutput compute_forward(const RunConfig& cfg) {
  const std::uint64_t seed = cfg.seed.value_or(0);
  const Modes modes{cfg.bn_mode.value_or(Mode::eval), cfg.dropout_mode.value_or(Mode::eval)};
  ForwardOutput out;
  if (cfg.target == "backbone") {
    const BackboneConfig bc = backbone_config(cfg);
    Backbone<float> b = build_backbone<float>(bc);
    const Tensor<float> x =
        resolve_input(cfg, Shape{1, bc.in_channels, bc.input_h, bc.input_w}, bc.seed);
    Taps<float> taps = forward_with_taps(x, b, modes, bc.seed);
    out.tensors.emplace_back("p3", std::move(taps.p3));
    out.tensors.emplace_back("p5", std::move(taps.p5));
    for (auto& [stage, r] : taps.blocks) {
      out.blocks.emplace_back("spci_p" + std::to_string(stage), std::move(r));
    }
  } else if (cfg.target == "spci") {
    SpciParams<float> p = spci_params(cfg);
    const std::size_t side = cfg.size.value_or(16);
    const Tensor<float> x = resolve_input(cfg, Shape{1, p.c_in(), side, side}, seed);
    SpciResult<float> r = spci_forward(x, p, modes, seed);
    out.tensors.emplace_back("out", r.out);
    out.blocks.emplace_back("spci", std::move(r));
    out.params = std::move(p);
  } else {
    throw ConfigError("unknown target '" + cfg.target + "' (expected backbone or spci)");
  }
  return out;
}

inline void summarize(std::ostream& os, const std::string& name, const Tensor<float>& t) {
  double mn = t[0], mx = t[0], sum = 0.0;
  for (float v : t.data()) {
    mn = std::min(mn, double(v));
    mx = std::max(mx, double(v));
    sum += v;
  }
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s.shape %s\n%s.min %.9g\n%s.max %.9g\n%s.mean %.9g\n",
                name.c_str(), io::shape_token(t.shape()).c_str(), name.c_str(), mn, name.c_str(),
                mx, name.c_str(), sum / static_cast<double>(t.size()));
  os << buf;
}

inline void prepare_out(const RunConfig& cfg) {
  if (cfg.out.empty()) throw ConfigError("--out is required for " + cfg.subcommand);
  std::error_code ec;
  fs::create_directories(cfg.out, ec);
  if (ec) throw IoError("cannot create output directory " + cfg.out + ": " + ec.message());
}

inline int run_forward(const RunConfig& cfg, std::ostream& log) {
  prepare_out(cfg);
  const ForwardOutput fwd = compute_forward(cfg);
  std::ostringstream summary;
  const fs::path dir(cfg.out);
  for (const auto& [name, t] : fwd.tensors) {
    io::save_tensor(dir / (name + ".spct"), t);
    summarize(summary, name, t);
  }
  for (const auto& [prefix, r] : fwd.blocks) {
    const std::pair<const char*, const std::optional<Tensor<float>>*> diags[] = {
        {"w_s", &r.w_s}, {"w_p", &r.w_p}, {"w_c", &r.w_c}};
    for (const auto& [tag, t] : diags) {
      if (!*t) continue;
      io::save_tensor(dir / (prefix + "." + tag + ".spct"), **t);
      summarize(summary, prefix + "." + tag, **t);
    }
  }
  if (cfg.save_weights && fwd.params) io::save_spci(*fwd.params, dir / "weights");
  std::ofstream os(dir / "summary.txt");
  if (!os) throw IoError("cannot write summary in " + cfg.out);
  os << summary.str();
  log << summary.str();
  return kOk;
}

inline int run_heatmap(const RunConfig& cfg, std::ostream& log) {
  prepare_out(cfg);
  const ForwardOutput fwd = compute_forward(cfg);
  const fs::path dir(cfg.out);
  for (const auto& [prefix, r] : fwd.blocks) {
    for (std::size_t n = 0; n < r.out.n(); ++n) {
      const std::string tag = r.out.n() > 1 ? "_n" + std::to_string(n) : "";
      if (r.w_s) {
        const fs::path p = dir / (prefix + ".w_s" + tag + ".pgm");
        write_pgm(p, heatmap_strip(*r.w_s, n));
        log << p.string() << '\n';
      }
      if (r.w_p) {
        const fs::path p = dir / (prefix + ".w_p" + tag + ".pgm");
        write_pgm(p, heatmap_plane(*r.w_p, n, 0));
        log << p.string() << '\n';
      }
      if (r.w_c) {
        for (std::size_t c = 0; c < r.w_c->c(); ++c) {
          const fs::path p = dir / (prefix + ".w_c" + tag + ".c" + std::to_string(c) + ".pgm");
          write_pgm(p, heatmap_plane(*r.w_c, n, c));
          log << p.string() << '\n';
        }
      }
    }
  }
  return kOk;
}

inline int run_cost(const RunConfig& cfg, std::ostream& log) {
  verify::CostReport report;
  if (cfg.target == "backbone") {
    report = verify::count_cost(build_backbone<float>(backbone_config(cfg)));
  } else if (cfg.target == "spci") {
    const SpciParams<float> p = spci_params(cfg);
    const std::size_t side = cfg.size.value_or(16);
    report = verify::count_cost(p, Shape{1, p.c_in(), side, side});
  } else {
    throw ConfigError("unknown target '" + cfg.target + "'");
  }
  std::ostringstream os;
  report.write(os);
  // Whole-detector reference figures need the full neck and head; reported as
  // context only.
  os << "context.reference_whole_model_params 3100000\n"
     << "context.reference_whole_model_gflops 8.3\n"
     << "context.whole_model_checkable 0\n";
  log << os.str();
  if (!cfg.out.empty()) {
    prepare_out(cfg);
    std::ofstream f(fs::path(cfg.out) / "cost.txt");
    if (!f) throw IoError("cannot write cost report in " + cfg.out);
    f << os.str();
  }
  return kOk;
}

inline int run_gradcheck(const RunConfig& cfg, std::ostream& log) {
  const std::uint64_t seed = cfg.seed.value_or(0);
  SpciParams<double> p = cfg.weights.empty()
                             ? init_spci<double>(cfg.channels, cfg.channels, kDefaultReduction,
                                                 kDefaultDropout, seed)
                             : io::load_spci<double>(cfg.weights);
  p.flags = flags_from(cfg, p.flags);
  const std::size_t side = cfg.size.value_or(6);
  auto [x, point_seed] = verify::smooth_test_point(p, Shape{1, p.c_in(), side, side}, seed);
  const verify::GradCheckReport report = verify::gradcheck_spci(p, x, 1e-4, 1e-4);
  std::ostringstream os;
  os << "test_point_seed " << point_seed << '\n';
  report.write(os);
  log << os.str();
  if (!cfg.out.empty()) {
    prepare_out(cfg);
    std::ofstream f(fs::path(cfg.out) / "gradcheck.txt");
    if (!f) throw IoError("cannot write gradcheck report in " + cfg.out);
    f << os.str();
  }
  return report.pass() ? kOk : kCheckFailed;
}

inline int run_train_toy(const RunConfig& cfg, std::ostream& log) {
  prepare_out(cfg);
  TrainToyConfig tc;
  tc.steps = cfg.steps;
  tc.lr = cfg.lr;
  tc.seed = cfg.seed.value_or(0);
  tc.flags = flags_from(cfg);
  tc.modes = Modes{cfg.bn_mode.value_or(Mode::train), cfg.dropout_mode.value_or(Mode::train)};
  const TrainToyResult r = train_toy(tc);
  std::ofstream f(fs::path(cfg.out) / "loss.txt");
  if (!f) throw IoError("cannot write loss trajectory in " + cfg.out);
  r.write(f);
  char buf[160];
  std::snprintf(buf, sizeof buf, "initial_loss %.9g\nfinal_loss %.9g\nratio %.9g\nsteps %zu\n",
                r.initial_loss(), r.final_loss(), r.final_loss() / r.initial_loss(),
                r.losses.size());
  log << buf;
  if (r.diverged) {
    log << "diverged 1\n";
    return kDiverged;
  }
  return kOk;
}

// Runs one subcommand and maps failures to exit codes:
// 2 config/format, 3 I/O or truncated file, 4 shape mismatch, 5 divergence.
inline int run(const RunConfig& cfg, std::ostream& log, std::ostream& err) {
  try {
    if (cfg.subcommand == "forward") return run_forward(cfg, log);
    if (cfg.subcommand == "heatmap") return run_heatmap(cfg, log);
    if (cfg.subcommand == "cost") return run_cost(cfg, log);
    if (cfg.subcommand == "gradcheck") return run_gradcheck(cfg, log);
    if (cfg.subcommand == "train-toy") return run_train_toy(cfg, log);
    err << "error: unknown subcommand '" << cfg.subcommand << "'\n";
    return kConfigError;
  } catch (const ShapeError& e) {
    err << "shape error: " << e.what() << '\n';
    return kShapeError;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kIoError;
  } catch (const TruncatedError& e) {
    err << "truncated file: " << e.what() << '\n';
    return kIoError;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << '\n';
    return kConfigError;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const fs::filesystem_error& e) {
    err << "i/o error: " << e.what() << '\n';
    return kIoError;
  }
}

}  // namespace spci::cli
