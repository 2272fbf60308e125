#include "cfsfl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

#include "cfsfl/errors.hpp"

namespace cfsfl {

namespace {

constexpr char kMagic[4] = {'C', 'F', 'S', 'F'};
constexpr std::uint8_t kFloat32 = 0;

template <typename T>
void put(std::ostream& out, T value) {
  static_assert(std::is_unsigned_v<T>);
  char bytes[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  out.write(bytes, sizeof(T));
}

template <typename T>
T get(std::istream& in, const char* what) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw FormatError(std::string("checkpoint truncated at ") + what);
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(bytes[i]) << (8 * i);
  return value;
}

std::string get_bytes(std::istream& in, std::uint64_t n, const char* what) {
  std::string s;
  constexpr std::uint64_t chunk = 1 << 20;
  while (s.size() < n) {
    const auto take = static_cast<std::size_t>(std::min<std::uint64_t>(chunk, n - s.size()));
    const auto old = s.size();
    s.resize(old + take);
    if (!in.read(s.data() + old, static_cast<std::streamsize>(take))) {
      throw FormatError(std::string("checkpoint truncated in ") + what);
    }
  }
  return s;
}

}  // namespace

Owner owner_for_name(const std::string& name) {
  const auto dot = name.find('.');
  if (dot == std::string::npos) throw FormatError("parameter name without owner prefix: " + name);
  try {
    return owner_from_string(name.substr(0, dot));
  } catch (const std::exception&) {
    throw FormatError("unknown parameter owner in name: " + name);
  }
}

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  const auto names = ckpt.params.names();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(names.size()));
  for (const auto& name : names) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw FormatError("parameter name too long");
    const Tensor& t = ckpt.params.at(name);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(out, kFloat32);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dims().size()));
    for (auto d : t.dims()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double x : t.data()) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(x)));
  }
  put<std::uint64_t>(out, ckpt.metadata_json.size());
  out.write(ckpt.metadata_json.data(), static_cast<std::streamsize>(ckpt.metadata_json.size()));
  if (!out) throw IoError("failed writing checkpoint");
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    write_checkpoint(out, ckpt);
    out.flush();
    if (!out) throw IoError("failed writing " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint read_checkpoint(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic)");
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const auto count = get<std::uint32_t>(in, "tensor count");
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint16_t>(in, "name length");
    std::string name = get_bytes(in, len, "tensor name");
    const auto dtype = get<std::uint8_t>(in, "dtype");
    if (dtype != kFloat32) throw FormatError("unsupported dtype code " + std::to_string(dtype) + " for " + name);
    const auto rank = get<std::uint8_t>(in, "rank");
    if (rank < 1 || rank > 2) throw FormatError("unsupported rank " + std::to_string(rank) + " for " + name);
    std::vector<std::size_t> dims;
    std::uint64_t total = 1;
    for (std::uint8_t r = 0; r < rank; ++r) {
      const auto d = get<std::uint32_t>(in, "dims");
      if (d == 0) throw FormatError("zero dimension in " + name);
      dims.push_back(d);
      total *= d;
      if (total > (std::uint64_t{1} << 34)) throw FormatError("tensor too large: " + name);
    }
    Tensor t(dims);
    for (double& x : t.data()) x = static_cast<double>(std::bit_cast<float>(get<std::uint32_t>(in, "tensor data")));
    if (!t.all_finite()) throw FormatError("non-finite values in " + name);
    const Owner owner = owner_for_name(name);
    try {
      ckpt.params.add(name, owner, std::move(t));
    } catch (const ContractError&) {
      throw FormatError("duplicate tensor " + name);
    }
  }
  const auto json_len = get<std::uint64_t>(in, "metadata length");
  ckpt.metadata_json = get_bytes(in, json_len, "metadata");
  return ckpt;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

}  // namespace cfsfl
