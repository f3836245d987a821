// Flat little-endian binary serialization for path clouds and trained nets,
// plus the CSV writer shared by all reporting paths (%.12g floats, one
// fingerprint comment line under the header).
#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "jumpbsde/paths.hpp"
#include "jumpbsde/solver.hpp"

namespace jumpbsde {
namespace io {

inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw std::runtime_error("io: truncated stream");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void write_doubles(std::ostream& os, const double* p, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, p + i, 8);
    write_u64(os, bits);
  }
}

inline void read_doubles(std::istream& is, double* p, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits = read_u64(is);
    std::memcpy(p + i, &bits, 8);
  }
}

inline void write_matrix(std::ostream& os, const MatrixXd& m) {
  write_u64(os, static_cast<std::uint64_t>(m.rows()));
  write_u64(os, static_cast<std::uint64_t>(m.cols()));
  write_doubles(os, m.data(), static_cast<std::size_t>(m.size()));
}

inline MatrixXd read_matrix(std::istream& is) {
  auto rows = static_cast<Eigen::Index>(read_u64(is));
  auto cols = static_cast<Eigen::Index>(read_u64(is));
  MatrixXd m(rows, cols);
  read_doubles(is, m.data(), static_cast<std::size_t>(m.size()));
  return m;
}

constexpr std::uint64_t kPathMagic = 0x4a42504154480001ull;  // "JBPATH" v1
constexpr std::uint64_t kNetMagic = 0x4a424e4554530001ull;   // "JBNETS" v1

inline void save_paths(const std::string& path, const PathBatch& pb) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_paths: cannot open " + path);
  write_u64(os, kPathMagic);
  write_u64(os, pb.seed);
  write_u64(os, pb.fingerprint);
  std::uint64_t ss_bits;
  std::memcpy(&ss_bits, &pb.sqrt_sigma_eps, 8);
  write_u64(os, ss_bits);
  write_u64(os, pb.states.size());
  for (const auto& s : pb.states) write_matrix(os, s);
  const IncrementBatch& inc = pb.increments;
  write_u64(os, static_cast<std::uint64_t>(inc.steps));
  write_u64(os, static_cast<std::uint64_t>(inc.batch));
  write_u64(os, static_cast<std::uint64_t>(inc.bm_dim));
  write_u64(os, inc.seed);
  for (int i = 0; i < inc.steps; ++i) {
    write_matrix(os, inc.dW[i]);
    write_matrix(os, inc.dWtil[i]);
    write_matrix(os, inc.counts[i]);
    const StepJumps& sj = inc.jumps[i];
    write_u64(os, sj.offsets.size());
    for (auto o : sj.offsets) write_u64(os, o);
    write_u64(os, sj.sizes.size());
    write_doubles(os, sj.sizes.data(), sj.sizes.size());
    for (auto c : sj.cell_index) write_u64(os, static_cast<std::uint64_t>(c));
  }
  write_u64(os, pb.valid.size());
  os.write(pb.valid.data(), static_cast<std::streamsize>(pb.valid.size()));
  if (!os) throw std::runtime_error("save_paths: write failed on " + path);
}

inline PathBatch load_paths(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_paths: cannot open " + path);
  if (read_u64(is) != kPathMagic) throw std::runtime_error("load_paths: bad magic in " + path);
  PathBatch pb;
  pb.seed = read_u64(is);
  pb.fingerprint = read_u64(is);
  std::uint64_t ss_bits = read_u64(is);
  std::memcpy(&pb.sqrt_sigma_eps, &ss_bits, 8);
  std::uint64_t n_states = read_u64(is);
  pb.states.resize(n_states);
  for (auto& s : pb.states) s = read_matrix(is);
  IncrementBatch& inc = pb.increments;
  inc.steps = static_cast<int>(read_u64(is));
  inc.batch = static_cast<int>(read_u64(is));
  inc.bm_dim = static_cast<int>(read_u64(is));
  inc.seed = read_u64(is);
  inc.dW.resize(inc.steps);
  inc.dWtil.resize(inc.steps);
  inc.counts.resize(inc.steps);
  inc.jumps.resize(inc.steps);
  for (int i = 0; i < inc.steps; ++i) {
    inc.dW[i] = read_matrix(is);
    inc.dWtil[i] = read_matrix(is);
    inc.counts[i] = read_matrix(is);
    StepJumps& sj = inc.jumps[i];
    sj.offsets.resize(read_u64(is));
    for (auto& o : sj.offsets) o = static_cast<std::size_t>(read_u64(is));
    sj.sizes.resize(read_u64(is));
    read_doubles(is, sj.sizes.data(), sj.sizes.size());
    sj.cell_index.resize(sj.sizes.size());
    for (auto& c : sj.cell_index) c = static_cast<int>(read_u64(is));
  }
  pb.valid.resize(read_u64(is));
  is.read(pb.valid.data(), static_cast<std::streamsize>(pb.valid.size()));
  if (!is) throw std::runtime_error("load_paths: truncated file " + path);
  pb.invalid_count = 0;
  for (char v : pb.valid)
    if (!v) ++pb.invalid_count;
  return pb;
}

inline void write_mlp(std::ostream& os, const Mlp& net) {
  write_u64(os, net.W.size());
  for (std::size_t l = 0; l < net.W.size(); ++l) {
    write_matrix(os, net.W[l]);
    write_matrix(os, net.bias[l]);
  }
}

inline Mlp read_mlp(std::istream& is) {
  Mlp net;
  std::uint64_t L = read_u64(is);
  for (std::uint64_t l = 0; l < L; ++l) {
    net.W.push_back(read_matrix(is));
    MatrixXd b = read_matrix(is);
    net.bias.push_back(b.row(0));
  }
  return net;
}

inline void save_nets(const std::string& path, const std::vector<StepNetworks>& nets) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_nets: cannot open " + path);
  write_u64(os, kNetMagic);
  write_u64(os, nets.size());
  for (const auto& sn : nets) {
    write_u64(os, sn.has_w ? 1 : 0);
    write_mlp(os, sn.y);
    write_mlp(os, sn.z);
    write_mlp(os, sn.u);
    if (sn.has_w) write_mlp(os, sn.w);
  }
  if (!os) throw std::runtime_error("save_nets: write failed on " + path);
}

inline std::vector<StepNetworks> load_nets(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_nets: cannot open " + path);
  if (read_u64(is) != kNetMagic) throw std::runtime_error("load_nets: bad magic in " + path);
  std::vector<StepNetworks> nets(read_u64(is));
  for (auto& sn : nets) {
    sn.has_w = read_u64(is) != 0;
    sn.y = read_mlp(is);
    sn.z = read_mlp(is);
    sn.u = read_mlp(is);
    if (sn.has_w) sn.w = read_mlp(is);
  }
  return nets;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

inline std::string format_g12(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

struct CsvWriter {
  std::ofstream os;

  CsvWriter(const std::string& path, const std::string& header, std::uint64_t fingerprint)
      : os(path) {
    if (!os) throw std::runtime_error("CsvWriter: cannot open " + path);
    os << header << "\n";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fingerprint));
    os << "# config-fingerprint: " << buf << "\n";
  }

  void row(const std::vector<double>& vals) {
    for (std::size_t i = 0; i < vals.size(); ++i) {
      if (i) os << ",";
      os << format_g12(vals[i]);
    }
    os << "\n";
  }

  void raw_row(const std::string& line) { os << line << "\n"; }
};

}  // namespace io
}  // namespace jumpbsde
