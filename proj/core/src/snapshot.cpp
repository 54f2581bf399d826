#include "cfl/snapshot.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "cfl/errors.hpp"

namespace cfl {

namespace {

constexpr std::array<char, 4> kBackboneMagic{'C', 'F', 'L', 'B'};
constexpr std::array<char, 4> kHeadMagic{'C', 'F', 'L', 'H'};
// Refuse absurd headers instead of attempting huge allocations.
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 32;

template <typename U>
void write_le(std::ostream& os, U v) {
  std::array<char, sizeof(U)> bytes;
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(bytes.data(), bytes.size());
}

template <typename U>
U read_le(std::istream& is) {
  std::array<unsigned char, sizeof(U)> bytes;
  is.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!is) throw IoError("snapshot: truncated record");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

void write_f64(std::ostream& os, double d) { write_le(os, std::bit_cast<std::uint64_t>(d)); }
double read_f64(std::istream& is) { return std::bit_cast<double>(read_le<std::uint64_t>(is)); }

void write_magic(std::ostream& os, const std::array<char, 4>& magic) {
  os.write(magic.data(), magic.size());
  write_le<std::uint32_t>(os, kSnapshotVersion);
}

void read_magic(std::istream& is, const std::array<char, 4>& magic, const char* what) {
  std::array<char, 4> got{};
  is.read(got.data(), got.size());
  if (!is || got != magic) throw IoError(std::string("snapshot: bad magic for ") + what);
  const auto version = read_le<std::uint32_t>(is);
  if (version != kSnapshotVersion) {
    throw IoError(std::string("snapshot: unsupported ") + what + " version " + std::to_string(version));
  }
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  return os;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return is;
}

}  // namespace

void save_backbone(std::ostream& os, const MlpBackbone& bb) {
  write_magic(os, kBackboneMagic);
  write_le<std::uint8_t>(os, static_cast<std::uint8_t>(bb.activation()));
  write_le<std::uint8_t>(os, static_cast<std::uint8_t>(bb.parameterization()));
  write_le<std::uint64_t>(os, bb.layer_dims().size());
  for (std::size_t d : bb.layer_dims()) write_le<std::uint64_t>(os, d);
  for (double p : bb.parameters()) write_f64(os, p);
  if (!os) throw IoError("snapshot: write failed");
}

MlpBackbone load_backbone(std::istream& is) {
  read_magic(is, kBackboneMagic, "backbone");
  const auto act = read_le<std::uint8_t>(is);
  const auto param = read_le<std::uint8_t>(is);
  if (act > 2 || param > 1) throw IoError("snapshot: bad backbone enum field");
  const auto n = read_le<std::uint64_t>(is);
  if (n < 2 || n > 4096) throw IoError("snapshot: bad layer count");
  std::vector<std::size_t> dims(n);
  for (auto& d : dims) {
    d = read_le<std::uint64_t>(is);
    if (d == 0 || d > kMaxElements) throw IoError("snapshot: bad layer width");
  }
  MlpBackbone bb(dims, static_cast<Activation>(act), static_cast<Parameterization>(param));
  std::vector<double> params(bb.parameter_count());
  for (double& p : params) p = read_f64(is);
  bb.set_parameters(params);
  return bb;
}

void save_head(std::ostream& os, const HeadState& head) {
  write_magic(os, kHeadMagic);
  write_le<std::uint64_t>(os, head.W.rows());
  write_le<std::uint64_t>(os, head.W.cols());
  write_le<std::uint8_t>(os, head.has_bias ? 1 : 0);
  write_le<std::uint8_t>(os, static_cast<std::uint8_t>(head.init_policy));
  write_le<std::uint8_t>(os, static_cast<std::uint8_t>(head.reg.kind));
  write_f64(os, head.reg.strength);
  for (double w : head.W.data()) write_f64(os, w);
  if (!os) throw IoError("snapshot: write failed");
}

HeadState load_head(std::istream& is) {
  read_magic(is, kHeadMagic, "head");
  const auto rows = read_le<std::uint64_t>(is);
  const auto cols = read_le<std::uint64_t>(is);
  if (rows == 0 || cols == 0 || rows * cols > kMaxElements) throw IoError("snapshot: bad head shape");
  HeadState head;
  head.has_bias = read_le<std::uint8_t>(is) != 0;
  const auto policy = read_le<std::uint8_t>(is);
  const auto kind = read_le<std::uint8_t>(is);
  if (policy > 3 || kind > 1) throw IoError("snapshot: bad head enum field");
  head.init_policy = static_cast<InitPolicy>(policy);
  head.reg.kind = static_cast<Regularizer::Kind>(kind);
  head.reg.strength = read_f64(is);
  head.W = Matrix(rows, cols);
  for (double& w : head.W.data()) w = read_f64(is);
  return head;
}

void save_backbone(const std::filesystem::path& path, const MlpBackbone& bb) {
  auto os = open_out(path);
  save_backbone(os, bb);
}

MlpBackbone load_backbone(const std::filesystem::path& path) {
  auto is = open_in(path);
  return load_backbone(is);
}

void save_head(const std::filesystem::path& path, const HeadState& head) {
  auto os = open_out(path);
  save_head(os, head);
}

HeadState load_head(const std::filesystem::path& path) {
  auto is = open_in(path);
  return load_head(is);
}

}  // namespace cfl
