// SPDX-License-Identifier: Apache-2.0
//
// Five-stage toy backbone with P3/P5 taps. Each stage is a stride-2 3x3
// convolution followed by ReLU; SPCI blocks are inserted after selected
// stages with unchanged channel width, so taps keep their baseline shapes.
#pragma once

#include <cctype>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "spci/autograd.hpp"
#include "spci/layers.hpp"
#include "spci/random.hpp"
#include "spci/spci.hpp"
#include "spci/tensor.hpp"

namespace spci {

inline constexpr std::size_t kNumStages = 5;

struct StageSpec {
  std::string name;  // P1..P5
  std::size_t out_channels = 0;
  std::size_t downsample = 2;
};

struct BackboneConfig {
  std::size_t input_h = 64;
  std::size_t input_w = 64;
  std::size_t in_channels = 3;
  std::vector<std::size_t> channels{8, 16, 32, 64, 128};
  std::set<int> spci_at{3, 5};  // stage indices, subset of {3,4,5}
  std::uint64_t seed = 0;
  std::size_t reduction = kDefaultReduction;
  double dropout = kDefaultDropout;
  SpciFlags flags;

  std::vector<StageSpec> stages() const {
    std::vector<StageSpec> out;
    for (std::size_t k = 0; k < channels.size(); ++k) {
      out.push_back({"P" + std::to_string(k + 1), channels[k], 2});
    }
    return out;
  }
};

inline void validate(const BackboneConfig& cfg) {
  if (cfg.input_h == 0 || cfg.input_w == 0 || cfg.input_h % 32 != 0 || cfg.input_w % 32 != 0) {
    throw ConfigError("input size " + std::to_string(cfg.input_h) + "x" +
                      std::to_string(cfg.input_w) + " must be positive multiples of 32");
  }
  if (cfg.in_channels == 0) throw ConfigError("in_channels must be positive");
  if (cfg.channels.size() != kNumStages) {
    throw ConfigError("channels must list exactly 5 stage widths");
  }
  for (std::size_t k = 0; k < kNumStages; ++k) {
    if (cfg.channels[k] == 0) throw ConfigError("stage widths must be positive");
    if (k > 0 && cfg.channels[k] < cfg.channels[k - 1]) {
      throw ConfigError("stage widths must be non-decreasing with depth");
    }
  }
  for (int s : cfg.spci_at) {
    if (s < 3 || s > 5) throw ConfigError("spci_at entries must be among p3, p4, p5");
  }
  if (!(cfg.dropout >= 0.0 && cfg.dropout < 1.0)) throw ConfigError("dropout must lie in [0,1)");
  if (cfg.reduction == 0) throw ConfigError("reduction must be positive");
}

// Accepts "p3,p5", "p3p5", "none", or an empty string.
inline std::set<int> parse_spci_at(const std::string& s) {
  std::set<int> out;
  if (s.empty() || s == "none") return out;
  std::string t;
  for (char ch : s) {
    if (ch != ',' && ch != ' ') t.push_back(static_cast<char>(std::tolower(ch)));
  }
  for (std::size_t i = 0; i < t.size();) {
    if (t[i] != 'p' || i + 1 >= t.size() || t[i + 1] < '1' || t[i + 1] > '5') {
      throw ConfigError("bad spci_at value '" + s + "'");
    }
    out.insert(t[i + 1] - '0');
    i += 2;
  }
  return out;
}

inline std::string spci_at_string(const std::set<int>& at) {
  if (at.empty()) return "none";
  std::string s;
  for (int k : at) {
    if (!s.empty()) s += ',';
    s += "p" + std::to_string(k);
  }
  return s;
}

// Key-value config: one "key = value" per line, '#' starts a comment.
// Keys: input_size (H,W), in_channels, channels (five widths), spci_at, seed,
// reduction, dropout, flags.
inline BackboneConfig parse_backbone_config(std::istream& is) {
  BackboneConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  auto list = [](const std::string& v) {
    std::vector<std::size_t> out;
    std::stringstream ss(v);
    for (std::string tok; std::getline(ss, tok, ',');) {
      std::size_t pos = 0;
      const unsigned long long x = std::stoull(tok, &pos);
      out.push_back(static_cast<std::size_t>(x));
    }
    return out;
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "config line " + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      if (key == "input_size") {
        const auto v = list(value);
        if (v.size() != 2) throw ConfigError(where + ": input_size needs H,W");
        cfg.input_h = v[0];
        cfg.input_w = v[1];
      } else if (key == "in_channels") {
        cfg.in_channels = static_cast<std::size_t>(std::stoull(value));
      } else if (key == "channels") {
        cfg.channels = list(value);
      } else if (key == "spci_at") {
        cfg.spci_at = parse_spci_at(value);
      } else if (key == "seed") {
        cfg.seed = std::stoull(value);
      } else if (key == "reduction") {
        cfg.reduction = static_cast<std::size_t>(std::stoull(value));
      } else if (key == "dropout") {
        cfg.dropout = std::stod(value);
      } else if (key == "flags") {
        SpciFlags f{false, false, false};
        if (value != "none") {
          std::stringstream ss(value);
          for (std::string tok; std::getline(ss, tok, ',');) {
            tok = trim(tok);
            if (tok == "ssg") {
              f.ssg = true;
            } else if (tok == "pfm") {
              f.pfm = true;
            } else if (tok == "cdm") {
              f.cdm = true;
            } else {
              throw ConfigError(where + ": unknown flag '" + tok + "'");
            }
          }
        }
        cfg.flags = f;
      } else {
        throw ConfigError(where + ": unknown key '" + key + "'");
      }
    } catch (const std::logic_error&) {
      throw ConfigError(where + ": bad value for '" + key + "'");
    }
  }
  validate(cfg);
  return cfg;
}

inline BackboneConfig load_backbone_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  return parse_backbone_config(is);
}

template <typename T>
struct Backbone {
  BackboneConfig config;
  std::vector<ConvLayer<T>> stages;    // 3x3, stride 2
  std::map<int, SpciParams<T>> blocks;  // keyed by stage index
};

// Stage weights come from their own seed stream, so they are identical for
// every spci_at choice under the same seed.
template <typename T>
Backbone<T> build_backbone(const BackboneConfig& cfg) {
  validate(cfg);
  Backbone<T> b;
  b.config = cfg;
  Rng rng(derive_seed(cfg.seed, 0));
  std::size_t c_prev = cfg.in_channels;
  for (std::size_t k = 0; k < kNumStages; ++k) {
    ConvLayer<T> conv(c_prev, cfg.channels[k], 3);
    conv.init_uniform(rng);
    b.stages.push_back(std::move(conv));
    c_prev = cfg.channels[k];
  }
  for (int s : cfg.spci_at) {
    const std::size_t c = cfg.channels[static_cast<std::size_t>(s - 1)];
    SpciParams<T> p = init_spci<T>(c, c, cfg.reduction, cfg.dropout,
                                   derive_seed(cfg.seed, 100 + static_cast<std::uint64_t>(s)));
    p.flags = cfg.flags;
    b.blocks.emplace(s, std::move(p));
  }
  return b;
}

template <typename P, typename Fn>
void visit_params_backbone(P& b, Fn&& fn) {
  for (std::size_t k = 0; k < b.stages.size(); ++k) {
    visit_conv("stage" + std::to_string(k + 1), b.stages[k], fn);
  }
  for (auto& [s, p] : b.blocks) visit_params(p, fn, "spci_p" + std::to_string(s) + ".");
}

struct TapVars {
  Var p3;
  Var p5;
  std::map<int, SpciVars> blocks;
};

template <typename T>
TapVars forward_with_taps(Tape<T>& tape, Backbone<T>& b, Var x, Modes mode, std::uint64_t seed) {
  const BackboneConfig& cfg = b.config;
  const Shape expect{tape.value(x).n(), cfg.in_channels, cfg.input_h, cfg.input_w};
  if (!(tape.value(x).shape() == expect)) {
    throw ShapeError("backbone input " + tape.value(x).shape().str() + " does not match configured " +
                     expect.str());
  }
  TapVars taps;
  Var h = x;
  for (std::size_t k = 0; k < kNumStages; ++k) {
    h = tape.relu(tape.subsample2(tape.conv2d(h, b.stages[k])));
    const int stage = static_cast<int>(k + 1);
    if (auto it = b.blocks.find(stage); it != b.blocks.end()) {
      const SpciVars v = spci_forward(tape, h, it->second, mode,
                                      derive_seed(seed, static_cast<std::uint64_t>(stage)));
      h = v.out;
      taps.blocks.emplace(stage, v);
    }
    if (stage == 3) taps.p3 = h;
    if (stage == 5) taps.p5 = h;
  }
  return taps;
}

template <typename T>
struct Taps {
  Tensor<T> p3;
  Tensor<T> p5;
  std::map<int, SpciResult<T>> blocks;
};

template <typename T>
Taps<T> forward_with_taps(const Tensor<T>& x, Backbone<T>& b, Modes mode = Mode::eval,
                          std::uint64_t seed = 0) {
  Tape<T> tape(false);
  const TapVars v = forward_with_taps(tape, b, tape.input(x), mode, seed);
  Taps<T> out{tape.value(v.p3), tape.value(v.p5), {}};
  for (const auto& [s, sv] : v.blocks) out.blocks.emplace(s, collect(tape, sv));
  return out;
}

}  // namespace spci
