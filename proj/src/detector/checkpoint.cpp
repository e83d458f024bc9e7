#include "i3net/detector/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace i3net::det {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

struct Reader {
  const std::string& bytes;
  const std::filesystem::path& file;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) const {
    if (bytes.size() - pos < n) {
      throw CheckpointError(file.string() + ": truncated " + what + " at byte " + std::to_string(pos));
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + pos, 4);
    pos += 4;
    return v;
  }
};

}  // namespace

double to_storage_precision(double v) { return static_cast<double>(static_cast<float>(v)); }

void round_to_storage_precision(nn::ParameterSet& params) {
  for (auto& [name, t] : params.items())
    for (double& v : t.mutable_data()) v = to_storage_precision(v);
}

void save_checkpoint(const std::filesystem::path& file, const std::vector<NamedArray>& arrays) {
  std::string out(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);
  for (const auto& a : arrays) {
    if (ad::numel(a.shape) != a.values.size()) {
      throw CheckpointError("array " + a.name + " has " + std::to_string(a.values.size()) + " values for shape " +
                            ad::shape_str(a.shape));
    }
    put_u32(out, static_cast<std::uint32_t>(a.name.size()));
    out += a.name;
    put_u32(out, static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : a.values) {
      const float f = static_cast<float>(v);
      char b[4];
      std::memcpy(b, &f, 4);
      out.append(b, 4);
    }
  }
  std::ofstream f(file, std::ios::binary);
  if (!f) throw CheckpointError("cannot write checkpoint " + file.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

std::vector<NamedArray> load_checkpoint(const std::filesystem::path& file) {
  std::ifstream f(file, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + file.string());
  const std::string bytes{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  Reader r{bytes, file};
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw CheckpointError(file.string() + ": not an I3NT checkpoint");
  r.pos = 4;
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(file.string() + ": checkpoint format version " + std::to_string(version) +
                          " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  std::vector<NamedArray> arrays;
  while (r.pos < bytes.size()) {
    NamedArray a;
    const std::uint32_t len = r.u32("name length");
    r.need(len, "name");
    a.name = bytes.substr(r.pos, len);
    r.pos += len;
    const std::uint32_t rank = r.u32("rank");
    for (std::uint32_t i = 0; i < rank; ++i) a.shape.push_back(r.u32("dimension"));
    const std::size_t n = ad::numel(a.shape);
    r.need(n * 4, "values");
    a.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      float v;
      std::memcpy(&v, bytes.data() + r.pos + i * 4, 4);
      a.values[i] = v;
    }
    r.pos += n * 4;
    arrays.push_back(std::move(a));
  }
  return arrays;
}

void append_parameters(std::vector<NamedArray>& arrays, const std::string& prefix, const nn::ParameterSet& params) {
  for (const auto& [name, t] : params.items()) {
    arrays.push_back({prefix + name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
  }
}

const NamedArray* try_find_array(const std::vector<NamedArray>& arrays, const std::string& name) {
  for (const auto& a : arrays)
    if (a.name == name) return &a;
  return nullptr;
}

const NamedArray& find_array(const std::vector<NamedArray>& arrays, const std::string& name) {
  if (const auto* a = try_find_array(arrays, name)) return *a;
  throw CheckpointError("checkpoint has no array named " + name);
}

void restore_parameters(const std::vector<NamedArray>& arrays, const std::string& prefix, nn::ParameterSet& params) {
  for (auto& [name, t] : params.items()) {
    const auto& a = find_array(arrays, prefix + name);
    if (a.shape != t.shape()) {
      throw CheckpointError("array " + a.name + " has shape " + ad::shape_str(a.shape) + ", expected " +
                            ad::shape_str(t.shape()));
    }
    std::copy(a.values.begin(), a.values.end(), t.mutable_data().begin());
  }
}

}  // namespace i3net::det
