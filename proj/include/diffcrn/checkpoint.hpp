#pragma once

// Versioned binary checkpoint: named float64 arrays plus string metadata.
//
// Layout (little-endian):
//   "DCRNCKPT" u32 version
//   str kind, str config_hash
//   u32 n_meta  { str key, str value }*
//   u32 n_arrays { str name, u32 rows, u32 cols, f64[rows*cols] row-major }*
// where str = u32 length + bytes.

#include "diffcrn/optim.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <string>

namespace diffcrn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string kind;  // "pretrain" | "classifier"
  std::string config_hash;
  std::uint32_t version = kCheckpointVersion;
  std::map<std::string, std::string> meta;
  std::map<std::string, Mat<double>> arrays;
};

namespace detail {

inline void put_u32(std::ostream& o, std::uint32_t v) { o.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_str(std::ostream& o, const std::string& s) {
  put_u32(o, static_cast<std::uint32_t>(s.size()));
  o.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::uint32_t get_u32(std::istream& in, const std::string& path) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  require(static_cast<bool>(in), path + ": truncated checkpoint");
  return v;
}
inline std::string get_str(std::istream& in, const std::string& path) {
  const std::uint32_t n = get_u32(in, path);
  require(n < (1u << 28), path + ": corrupt checkpoint string");
  std::string s(n, '\0');
  in.read(s.data(), n);
  require(static_cast<bool>(in), path + ": truncated checkpoint");
  return s;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), "cannot open " + path + " for writing");
  out.write("DCRNCKPT", 8);
  detail::put_u32(out, ck.version);
  detail::put_str(out, ck.kind);
  detail::put_str(out, ck.config_hash);
  detail::put_u32(out, static_cast<std::uint32_t>(ck.meta.size()));
  for (const auto& [k, v] : ck.meta) {
    detail::put_str(out, k);
    detail::put_str(out, v);
  }
  detail::put_u32(out, static_cast<std::uint32_t>(ck.arrays.size()));
  for (const auto& [name, m] : ck.arrays) {
    detail::put_str(out, name);
    detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
    detail::put_u32(out, static_cast<std::uint32_t>(m.cols()));
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
  require(static_cast<bool>(out), "write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, 8);
  require(static_cast<bool>(in) && std::memcmp(magic, "DCRNCKPT", 8) == 0, path + ": not a checkpoint");
  Checkpoint ck;
  ck.version = detail::get_u32(in, path);
  require(ck.version == kCheckpointVersion, path + ": unsupported checkpoint version " + std::to_string(ck.version));
  ck.kind = detail::get_str(in, path);
  ck.config_hash = detail::get_str(in, path);
  const std::uint32_t n_meta = detail::get_u32(in, path);
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = detail::get_str(in, path);
    ck.meta[k] = detail::get_str(in, path);
  }
  const std::uint32_t n_arrays = detail::get_u32(in, path);
  for (std::uint32_t i = 0; i < n_arrays; ++i) {
    std::string name = detail::get_str(in, path);
    const std::uint32_t rows = detail::get_u32(in, path);
    const std::uint32_t cols = detail::get_u32(in, path);
    Mat<double> m(rows, cols);
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    require(static_cast<bool>(in), path + ": truncated array '" + name + "'");
    ck.arrays.emplace(std::move(name), std::move(m));
  }
  return ck;
}

template <typename S>
void store_params(Checkpoint& ck, const ParamList<S>& params, const std::string& prefix = "param.") {
  for (const Parameter<S>* p : params) ck.arrays[prefix + p->name] = p->value.template cast<double>();
}

/// Copies arrays back into `params`; any missing key, shape mismatch or
/// unexpected extra key under `prefix` is an error.
template <typename S>
void restore_params(const Checkpoint& ck, const ParamList<S>& params, const std::string& prefix = "param.") {
  std::size_t expected = 0;
  for (const auto& [name, _] : ck.arrays) {
    if (name.rfind(prefix, 0) == 0) ++expected;
  }
  for (Parameter<S>* p : params) {
    auto it = ck.arrays.find(prefix + p->name);
    if (it == ck.arrays.end()) throw Error("checkpoint key mismatch: missing '" + prefix + p->name + "'");
    if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols()) {
      throw Error("checkpoint shape mismatch for '" + p->name + "': stored " + std::to_string(it->second.rows()) + "x" +
                  std::to_string(it->second.cols()) + ", model " + std::to_string(p->value.rows()) + "x" +
                  std::to_string(p->value.cols()));
    }
    p->value = it->second.template cast<S>();
  }
  if (expected != params.size()) {
    throw Error("checkpoint key mismatch: " + std::to_string(expected) + " stored arrays under '" + prefix + "', model has " +
                std::to_string(params.size()));
  }
}

template <typename S>
void store_optimizer(Checkpoint& ck, Adam<S>& opt) {
  const auto& params = opt.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    ck.arrays["adam.m." + params[i]->name] = opt.first_moments()[i].template cast<double>();
    ck.arrays["adam.v." + params[i]->name] = opt.second_moments()[i].template cast<double>();
  }
  ck.meta["adam.steps"] = std::to_string(opt.steps());
}

template <typename S>
void restore_optimizer(const Checkpoint& ck, Adam<S>& opt) {
  const auto& params = opt.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto m = ck.arrays.find("adam.m." + params[i]->name);
    auto v = ck.arrays.find("adam.v." + params[i]->name);
    require(m != ck.arrays.end() && v != ck.arrays.end(), "checkpoint key mismatch: missing optimizer state for '" +
                                                              params[i]->name + "'");
    opt.first_moments()[i] = m->second.template cast<S>();
    opt.second_moments()[i] = v->second.template cast<S>();
  }
  auto it = ck.meta.find("adam.steps");
  opt.set_steps(it == ck.meta.end() ? 0 : std::stoll(it->second));
}

}  // namespace diffcrn
