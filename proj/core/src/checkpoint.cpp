#include "cradle/checkpoint.hpp"

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cradle/errors.hpp"

namespace cradle {

namespace {

constexpr char kMagic[8] = {'C', 'R', 'A', 'D', 'L', 'E', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T read_pod(std::istream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw DataError("checkpoint '" + path + "': truncated file");
  return v;
}

}  // namespace

void write_tensor_file(const std::string& path, const std::vector<NamedTensor>& tensors) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("checkpoint: cannot open '" + tmp + "' for writing");
    out.write(kMagic, sizeof(kMagic));
    write_pod<std::uint32_t>(out, kVersion);
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
      write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
      out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
      write_pod<std::uint32_t>(out, 2);
      write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(t.value.rows()));
      write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(t.value.cols()));
    }
    for (const auto& t : tensors) {
      for (Eigen::Index i = 0; i < t.value.rows(); ++i)
        for (Eigen::Index j = 0; j < t.value.cols(); ++j) write_pod<double>(out, t.value(i, j));
    }
    if (!out) throw DataError("checkpoint: write failed on '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

std::vector<NamedTensor> read_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint '" + path + "': cannot open");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::string(magic, 8) != std::string(kMagic, 8))
    throw DataError("checkpoint '" + path + "': bad magic");
  const auto version = read_pod<std::uint32_t>(in, path);
  if (version != kVersion)
    throw DataError("checkpoint '" + path + "': unsupported version " + std::to_string(version));
  const auto count = read_pod<std::uint32_t>(in, path);
  std::vector<NamedTensor> tensors(count);
  for (auto& t : tensors) {
    const auto name_len = read_pod<std::uint32_t>(in, path);
    t.name.resize(name_len);
    in.read(t.name.data(), name_len);
    if (!in) throw DataError("checkpoint '" + path + "': truncated file");
    const auto ndim = read_pod<std::uint32_t>(in, path);
    if (ndim != 2) throw DataError("checkpoint '" + path + "': unsupported rank");
    const auto rows = read_pod<std::uint64_t>(in, path);
    const auto cols = read_pod<std::uint64_t>(in, path);
    t.value.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  }
  for (auto& t : tensors) {
    for (Eigen::Index i = 0; i < t.value.rows(); ++i)
      for (Eigen::Index j = 0; j < t.value.cols(); ++j)
        t.value(i, j) = read_pod<double>(in, path);
  }
  return tensors;
}

void load_into_store(const std::vector<NamedTensor>& tensors, ParamStore& store) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;
  for (auto& [name, var] : store.items()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("checkpoint: missing tensor '" + name + "'");
    const Array& v = it->second->value;
    if (v.rows() != var.rows() || v.cols() != var.cols())
      throw DataError("checkpoint: shape mismatch for '" + name + "': file (" +
                      std::to_string(v.rows()) + "," + std::to_string(v.cols()) + "), expected (" +
                      std::to_string(var.rows()) + "," + std::to_string(var.cols()) + ")");
    var.set_value(v);
  }
}

std::vector<NamedTensor> store_to_tensors(const ParamStore& store) {
  std::vector<NamedTensor> out;
  out.reserve(store.size());
  for (const auto& [name, var] : store.items()) out.push_back({name, var.value()});
  return out;
}

}  // namespace cradle
