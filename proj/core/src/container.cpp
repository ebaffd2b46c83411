// SPDX-License-Identifier: Apache-2.0
#include "dmavg/container.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "dmavg/errors.hpp"

namespace dmavg {

using json = nlohmann::json;

namespace {

constexpr char kMagic[8] = {'D', 'M', 'A', 'V', 'G', 'C', '0', '1'};

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32:
      return 4;
    case DType::f64:
    case DType::i64:
      return 8;
    case DType::u8:
      return 1;
  }
  throw IoError("unknown dtype");
}

template <class T>
TensorEntry make_entry(DType dtype, const std::vector<T>& values, std::vector<std::uint64_t> shape) {
  TensorEntry e;
  e.dtype = dtype;
  e.shape = shape.empty() ? std::vector<std::uint64_t>{values.size()} : std::move(shape);
  if (e.element_count() != values.size()) {
    throw InvalidArgument("tensor shape does not match value count");
  }
  e.bytes.resize(values.size() * sizeof(T));
  std::memcpy(e.bytes.data(), values.data(), e.bytes.size());
  return e;
}

template <class T>
std::vector<T> read_as(const TensorEntry& e, DType expected) {
  if (e.dtype != expected) {
    throw IoError(std::string("tensor dtype is ") + to_string(e.dtype) + ", expected " + to_string(expected));
  }
  std::vector<T> out(e.bytes.size() / sizeof(T));
  std::memcpy(out.data(), e.bytes.data(), out.size() * sizeof(T));
  return out;
}

template <class T>
void put(std::ofstream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T get(std::ifstream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw IoError("container truncated");
  return value;
}

}  // namespace

const char* to_string(DType dtype) {
  switch (dtype) {
    case DType::f32:
      return "f32";
    case DType::f64:
      return "f64";
    case DType::i64:
      return "i64";
    case DType::u8:
      return "u8";
  }
  return "?";
}

std::size_t TensorEntry::element_count() const {
  std::size_t n = 1;
  for (auto d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

TensorEntry TensorEntry::from(const std::vector<float>& values, std::vector<std::uint64_t> shape) {
  return make_entry(DType::f32, values, std::move(shape));
}
TensorEntry TensorEntry::from(const std::vector<double>& values, std::vector<std::uint64_t> shape) {
  return make_entry(DType::f64, values, std::move(shape));
}
TensorEntry TensorEntry::from(const std::vector<std::int64_t>& values, std::vector<std::uint64_t> shape) {
  return make_entry(DType::i64, values, std::move(shape));
}

std::vector<float> TensorEntry::as_f32() const { return read_as<float>(*this, DType::f32); }
std::vector<double> TensorEntry::as_f64() const { return read_as<double>(*this, DType::f64); }
std::vector<std::int64_t> TensorEntry::as_i64() const { return read_as<std::int64_t>(*this, DType::i64); }

const TensorEntry& Container::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) {
    throw IoError("container has no tensor named '" + name + "'");
  }
  return it->second;
}

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".json";
  return p;
}

void write_container(const Container& container, const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(container.tensors.size()));
  json entries = json::array();
  for (const auto& [name, e] : container.tensors) {
    if (e.bytes.size() != e.element_count() * dtype_size(e.dtype)) {
      throw InvalidArgument("tensor '" + name + "' byte size does not match its shape");
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.dtype));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) put<std::uint64_t>(out, d);
    put<std::uint64_t>(out, e.bytes.size());
    out.write(reinterpret_cast<const char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size()));
    entries.push_back({{"name", name}, {"dtype", to_string(e.dtype)}, {"shape", e.shape}});
  }
  if (!out) throw IoError("failed writing " + path.string());

  json side;
  side["format"] = "dmavg-container";
  side["version"] = 1;
  side["entries"] = entries;
  side["meta"] = json::parse(container.meta_json);
  std::ofstream sc(sidecar_path(path), std::ios::trunc);
  if (!sc) throw IoError("cannot write sidecar for " + path.string());
  sc << side.dump(2) << '\n';
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IoError(path.string() + " is not a dmavg container");
  }
  Container c;
  const auto count = get<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint32_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    TensorEntry e;
    e.dtype = static_cast<DType>(get<std::uint8_t>(in));
    dtype_size(e.dtype);
    const auto ndim = get<std::uint32_t>(in);
    for (std::uint32_t k = 0; k < ndim; ++k) e.shape.push_back(get<std::uint64_t>(in));
    const auto nbytes = get<std::uint64_t>(in);
    if (nbytes != e.element_count() * dtype_size(e.dtype)) {
      throw IoError("tensor '" + name + "' in " + path.string() + " is corrupt");
    }
    e.bytes.resize(nbytes);
    in.read(reinterpret_cast<char*>(e.bytes.data()), static_cast<std::streamsize>(nbytes));
    if (!in) throw IoError("container truncated");
    c.tensors.emplace(std::move(name), std::move(e));
  }
  std::ifstream sc(sidecar_path(path));
  if (sc) {
    const json side = json::parse(sc);
    c.meta_json = side.value("meta", json::object()).dump();
  }
  return c;
}

}  // namespace dmavg
