// SPDX-License-Identifier: Apache-2.0
//
// SPCT tensor files and SPCI weight manifests.
//
// SPCT: one ASCII header line "SPCT1 N C H W precision\n" (precision is
// "single" or "double") followed by N*C*H*W little-endian IEEE-754 scalars in
// row-major NCHW order.
//
// Manifest: plain text. Six header lines
//   c_in <int>
//   c_out <int>
//   r <int>
//   c_mid_cdm <int>
//   dropout <float>
//   flags <comma list of ssg,pfm,cdm | none>
// then one line per parameter tensor: "<layer.name> <N,C,H,W> <path>", with
// paths relative to the manifest's directory. A conv bias line may be omitted,
// which loads that convolution without bias.
#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "spci/spci.hpp"
#include "spci/tensor.hpp"

namespace spci::io {

namespace fs = std::filesystem;

enum class Precision { single, double_ };

inline const char* to_string(Precision p) { return p == Precision::single ? "single" : "double"; }

template <typename T>
constexpr Precision precision_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? Precision::single : Precision::double_;
}

namespace detail {

template <typename U>
U to_little(U bits) {
  if constexpr (std::endian::native == std::endian::little) {
    return bits;
  } else {
    U out = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) out = (out << 8) | ((bits >> (8 * i)) & 0xFF);
    return out;
  }
}

template <typename S>
void write_scalars(std::ostream& os, std::span<const S> data) {
  using Bits = std::conditional_t<sizeof(S) == 4, std::uint32_t, std::uint64_t>;
  std::vector<char> buf(data.size() * sizeof(S));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Bits b = to_little(std::bit_cast<Bits>(data[i]));
    std::memcpy(buf.data() + i * sizeof(S), &b, sizeof(S));
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

template <typename S>
std::vector<S> read_scalars(std::istream& is, std::size_t count, const std::string& what) {
  using Bits = std::conditional_t<sizeof(S) == 4, std::uint32_t, std::uint64_t>;
  std::vector<char> buf(count * sizeof(S));
  is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(is.gcount()) != buf.size()) {
    throw TruncatedError(what + ": expected " + std::to_string(buf.size()) + " payload bytes, got " +
                         std::to_string(is.gcount()));
  }
  std::vector<S> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    Bits b;
    std::memcpy(&b, buf.data() + i * sizeof(S), sizeof(S));
    out[i] = std::bit_cast<S>(to_little(b));
  }
  return out;
}

inline std::size_t parse_dim(const std::string& tok, const std::string& what) {
  if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos) {
    throw FormatError(what + ": bad dimension '" + tok + "'");
  }
  const unsigned long long v = std::stoull(tok);
  if (v == 0) throw FormatError(what + ": dimension must be positive");
  return static_cast<std::size_t>(v);
}

}  // namespace detail

struct SpctHeader {
  Shape shape;
  Precision precision = Precision::single;
};

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  const Shape& s = t.shape();
  os << "SPCT1 " << s.n << ' ' << s.c << ' ' << s.h << ' ' << s.w << ' '
     << to_string(precision_of<T>()) << '\n';
  detail::write_scalars<T>(os, t.data());
}

template <typename T>
void save_tensor(const fs::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
  if (!os) throw IoError("write failed for " + path.string());
}

inline SpctHeader read_header(std::istream& is, const std::string& what) {
  std::string line;
  // Header is short; refuse to scan arbitrary binary for a newline.
  char ch;
  while (is.get(ch) && ch != '\n') {
    line.push_back(ch);
    if (line.size() > 256) throw FormatError(what + ": header line too long");
  }
  if (!is && line.empty()) throw TruncatedError(what + ": empty file");
  if (ch != '\n') throw FormatError(what + ": header line not terminated");
  std::istringstream ss(line);
  std::vector<std::string> tok;
  for (std::string s; ss >> s;) tok.push_back(s);
  if (tok.size() != 6 || tok[0] != "SPCT1") {
    throw FormatError(what + ": malformed header '" + line + "'");
  }
  SpctHeader h;
  h.shape = Shape{detail::parse_dim(tok[1], what), detail::parse_dim(tok[2], what),
                  detail::parse_dim(tok[3], what), detail::parse_dim(tok[4], what)};
  if (tok[5] == "single") {
    h.precision = Precision::single;
  } else if (tok[5] == "double") {
    h.precision = Precision::double_;
  } else {
    throw FormatError(what + ": unknown precision '" + tok[5] + "'");
  }
  return h;
}

// Reads either precision and converts to T.
template <typename T>
Tensor<T> read_tensor(std::istream& is, const std::string& what = "tensor") {
  const SpctHeader h = read_header(is, what);
  const std::size_t count = h.shape.size();
  Tensor<T> out;
  if (h.precision == Precision::single) {
    out = Tensor<float>(h.shape, detail::read_scalars<float>(is, count, what)).template cast<T>();
  } else {
    out = Tensor<double>(h.shape, detail::read_scalars<double>(is, count, what)).template cast<T>();
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw FormatError(what + ": trailing bytes after payload");
  }
  return out;
}

template <typename T>
Tensor<T> load_tensor(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_tensor<T>(is, path.string());
}

// ---------------------------------------------------------------------------
// Manifest

inline std::string flags_string(const SpciFlags& f) {
  std::string s;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += ',';
    s += name;
  };
  add(f.ssg, "ssg");
  add(f.pfm, "pfm");
  add(f.cdm, "cdm");
  return s.empty() ? "none" : s;
}

inline SpciFlags parse_flags(const std::string& s) {
  SpciFlags f{false, false, false};
  if (s == "none") return f;
  std::istringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    if (tok == "ssg") {
      f.ssg = true;
    } else if (tok == "pfm") {
      f.pfm = true;
    } else if (tok == "cdm") {
      f.cdm = true;
    } else {
      throw FormatError("manifest: unknown flag '" + tok + "'");
    }
  }
  return f;
}

inline std::string shape_token(const Shape& s) {
  return std::to_string(s.n) + "," + std::to_string(s.c) + "," + std::to_string(s.h) + "," +
         std::to_string(s.w);
}

inline Shape parse_shape_token(const std::string& tok, const std::string& what) {
  std::istringstream ss(tok);
  std::vector<std::size_t> dims;
  for (std::string d; std::getline(ss, d, ',');) dims.push_back(detail::parse_dim(d, what));
  if (dims.size() != 4) throw FormatError(what + ": shape '" + tok + "' must have four dimensions");
  return Shape{dims[0], dims[1], dims[2], dims[3]};
}

// Writes <dir>/<stem>.manifest plus one SPCT file per parameter tensor.
template <typename T>
fs::path save_spci(const SpciParams<T>& p, const fs::path& dir, const std::string& stem = "spci") {
  fs::create_directories(dir);
  const fs::path manifest = dir / (stem + ".manifest");
  std::ofstream os(manifest);
  if (!os) throw IoError("cannot open " + manifest.string() + " for writing");
  os << "c_in " << p.c_in() << '\n'
     << "c_out " << p.c_out() << '\n'
     << "r " << p.ssg.reduction << '\n'
     << "c_mid_cdm " << p.cdm.mid_channels() << '\n'
     << "dropout " << std::setprecision(std::numeric_limits<double>::max_digits10) << p.dropout
     << '\n'
     << "flags " << flags_string(p.flags) << '\n';
  visit_params(p, [&](const std::string& name, const Tensor<T>& t, bool) {
    const std::string file = stem + "." + name + ".spct";
    save_tensor(dir / file, t);
    os << name << ' ' << shape_token(t.shape()) << ' ' << file << '\n';
  });
  if (!os) throw IoError("write failed for " + manifest.string());
  return manifest;
}

template <typename T>
SpciParams<T> load_spci(const fs::path& manifest) {
  std::ifstream is(manifest);
  if (!is) throw IoError("cannot open manifest " + manifest.string());
  const std::string what = "manifest " + manifest.string();

  std::map<std::string, std::string> header;
  struct Entry {
    Shape shape;
    std::string path;
  };
  std::map<std::string, Entry> entries;
  static const char* kHeaderKeys[] = {"c_in", "c_out", "r", "c_mid_cdm", "dropout", "flags"};

  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::vector<std::string> tok;
    for (std::string s; ss >> s;) tok.push_back(s);
    if (tok.empty() || tok[0][0] == '#') continue;
    const bool is_header = std::find(std::begin(kHeaderKeys), std::end(kHeaderKeys), tok[0]) !=
                           std::end(kHeaderKeys);
    const std::string where = what + " line " + std::to_string(lineno);
    if (is_header) {
      if (tok.size() != 2) throw FormatError(where + ": expected '<key> <value>'");
      if (!header.emplace(tok[0], tok[1]).second) throw FormatError(where + ": duplicate key");
    } else {
      if (tok.size() != 3) throw FormatError(where + ": expected '<name> <shape> <path>'");
      if (entries.count(tok[0])) throw FormatError(where + ": duplicate tensor " + tok[0]);
      entries[tok[0]] = Entry{parse_shape_token(tok[1], where), tok[2]};
    }
  }
  for (const char* key : kHeaderKeys) {
    if (!header.count(key)) throw FormatError(what + ": missing header key '" + key + "'");
  }

  auto as_dim = [&](const char* key) { return detail::parse_dim(header[key], what + " " + key); };
  const std::size_t c_in = as_dim("c_in");
  const std::size_t c_out = as_dim("c_out");
  const std::size_t r = as_dim("r");
  const std::size_t c_mid = as_dim("c_mid_cdm");
  double dropout;
  {
    std::istringstream ds(header["dropout"]);
    if (!(ds >> dropout) || !ds.eof()) throw FormatError(what + ": bad dropout value");
  }
  if (c_mid != cdm_mid_channels(c_out)) {
    throw ShapeError(what + ": c_mid_cdm " + std::to_string(c_mid) + " inconsistent with c_out " +
                     std::to_string(c_out) + " (expected " +
                     std::to_string(cdm_mid_channels(c_out)) + ")");
  }

  SpciParams<T> p;
  try {
    p = make_spci<T>(c_in, c_out, r, dropout);
  } catch (const ConfigError& e) {
    throw FormatError(what + ": " + e.what());
  }
  p.flags = parse_flags(header["flags"]);

  // Absent biases are allowed; every other tensor is required.
  auto drop_missing_bias = [&](const std::string& name, ConvLayer<T>& conv) {
    if (!entries.count(name + ".bias")) conv.use_bias = false;
  };
  drop_missing_bias("ssg.conv1", p.ssg.conv1);
  drop_missing_bias("ssg.conv2", p.ssg.conv2);
  drop_missing_bias("transform", p.transform);
  drop_missing_bias("pfm.conv7", p.pfm.conv7);
  drop_missing_bias("cdm.conv1", p.cdm.conv1);
  drop_missing_bias("cdm.conv2", p.cdm.conv2);
  drop_missing_bias("cdm.conv3", p.cdm.conv3);

  const fs::path base = manifest.parent_path();
  std::size_t used = 0;
  visit_params(p, [&](const std::string& name, Tensor<T>& t, bool) {
    const auto it = entries.find(name);
    if (it == entries.end()) throw FormatError(what + ": missing tensor " + name);
    ++used;
    if (!(it->second.shape == t.shape())) {
      throw ShapeError(what + ": " + name + " declared " + it->second.shape.str() + ", expected " +
                       t.shape().str());
    }
    Tensor<T> loaded = load_tensor<T>(base / it->second.path);
    if (!(loaded.shape() == t.shape())) {
      throw ShapeError(what + ": " + name + " file holds " + loaded.shape().str() + ", expected " +
                       t.shape().str());
    }
    t = std::move(loaded);
  });
  if (used != entries.size()) {
    for (const auto& [name, e] : entries) {
      bool known = false;
      visit_params(p, [&](const std::string& n, const Tensor<T>&, bool) { known |= n == name; });
      if (!known) throw FormatError(what + ": unknown tensor " + name);
    }
  }
  for (const auto* bn : {&p.cdm.bn1, &p.cdm.bn2}) {
    for (std::size_t c = 0; c < bn->channels(); ++c) {
      if (!(bn->running_var[c] > T(0))) {
        throw FormatError(what + ": batch norm running_var must be strictly positive");
      }
    }
  }
  return p;
}

}  // namespace spci::io
