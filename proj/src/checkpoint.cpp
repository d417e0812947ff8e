#include "partformer/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace pf {

namespace {

constexpr char kMagic[4] = {'P', 'F', 'C', 'K'};

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw DataError(std::string("checkpoint: truncated ") + what);
  return v;
}

}  // namespace

const NamedTensor& Container::at(const std::string& name) const {
  for (const NamedTensor& t : tensors) {
    if (t.name == name) return t;
  }
  throw DataError("container has no tensor named '" + name + "'");
}

bool Container::has(const std::string& name) const {
  for (const NamedTensor& t : tensors) {
    if (t.name == name) return true;
  }
  return false;
}

void save_container(const std::string& path, const Container& c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot create " + path);
  os.write(kMagic, 4);
  write_pod<std::uint32_t>(os, c.version);
  write_pod<std::uint64_t>(os, c.config_text.size());
  os.write(c.config_text.data(),
           static_cast<std::streamsize>(c.config_text.size()));
  write_pod<std::uint64_t>(os, c.step);
  write_pod<std::uint64_t>(os, c.tensors.size());
  for (const NamedTensor& t : c.tensors) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(t.dtype));
    write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(t.shape.size()));
    std::size_t n = 1;
    for (std::size_t d : t.shape) {
      write_pod<std::uint64_t>(os, d);
      n *= d;
    }
    switch (t.dtype) {
      case DType::kF64:
        if (t.f64.size() != n) throw ContractError("payload size mismatch");
        os.write(reinterpret_cast<const char*>(t.f64.data()),
                 static_cast<std::streamsize>(n * sizeof(double)));
        break;
      case DType::kF32: {
        if (t.f64.size() != n) throw ContractError("payload size mismatch");
        std::vector<float> f(t.f64.begin(), t.f64.end());
        os.write(reinterpret_cast<const char*>(f.data()),
                 static_cast<std::streamsize>(n * sizeof(float)));
        break;
      }
      case DType::kI64:
        if (t.i64.size() != n) throw ContractError("payload size mismatch");
        os.write(reinterpret_cast<const char*>(t.i64.data()),
                 static_cast<std::streamsize>(n * sizeof(std::int64_t)));
        break;
    }
  }
  if (!os) throw DataError("write failed for " + path);
}

Container load_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw DataError(path + " is not a PFCK container");
  }
  Container c;
  c.version = read_pod<std::uint32_t>(is, "version");
  if (c.version != 1) {
    throw DataError("unsupported container version " +
                    std::to_string(c.version));
  }
  const auto cfg_len = read_pod<std::uint64_t>(is, "config length");
  c.config_text.resize(cfg_len);
  is.read(c.config_text.data(), static_cast<std::streamsize>(cfg_len));
  if (!is) throw DataError("checkpoint: truncated config text");
  c.step = read_pod<std::uint64_t>(is, "step");
  const auto count = read_pod<std::uint64_t>(is, "tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto name_len = read_pod<std::uint32_t>(is, "name length");
    t.name.resize(name_len);
    is.read(t.name.data(), name_len);
    if (!is) throw DataError("checkpoint: truncated tensor name");
    const auto dtype = read_pod<std::uint8_t>(is, "dtype");
    if (dtype > 2) throw DataError("checkpoint: bad dtype tag");
    t.dtype = static_cast<DType>(dtype);
    const auto ndim = read_pod<std::uint8_t>(is, "rank");
    std::size_t n = 1;
    for (std::uint8_t d = 0; d < ndim; ++d) {
      t.shape.push_back(read_pod<std::uint64_t>(is, "extent"));
      n *= t.shape.back();
    }
    switch (t.dtype) {
      case DType::kF64:
        t.f64.resize(n);
        is.read(reinterpret_cast<char*>(t.f64.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
        break;
      case DType::kF32: {
        std::vector<float> f(n);
        is.read(reinterpret_cast<char*>(f.data()),
                static_cast<std::streamsize>(n * sizeof(float)));
        t.f64.assign(f.begin(), f.end());
        break;
      }
      case DType::kI64:
        t.i64.resize(n);
        is.read(reinterpret_cast<char*>(t.i64.data()),
                static_cast<std::streamsize>(n * sizeof(std::int64_t)));
        break;
    }
    if (!is) throw DataError("checkpoint: truncated payload for " + t.name);
    c.tensors.push_back(std::move(t));
  }
  return c;
}

void save_checkpoint(const std::string& path, const std::string& config_text,
                     std::uint64_t step, const ParamStore& params) {
  Container c;
  c.config_text = config_text;
  c.step = step;
  for (const std::string& name : params.names()) {
    NamedTensor t;
    t.name = name;
    t.dtype = DType::kF64;
    t.shape = params.at(name).shape();
    t.f64 = params.at(name).data();
    c.tensors.push_back(std::move(t));
  }
  save_container(path, c);
}

void load_checkpoint_into(const Container& c, ParamStore& params) {
  for (const std::string& name : params.names()) {
    if (!c.has(name)) {
      throw ConfigError("checkpoint is missing tensor '" + name +
                        "' required by this configuration");
    }
    const NamedTensor& t = c.at(name);
    Tensor& dst = params.at(name);
    if (t.shape != dst.shape()) {
      throw ConfigError("checkpoint tensor '" + name + "' has shape " +
                        shape_str(t.shape) + ", model expects " +
                        shape_str(dst.shape()));
    }
    if (t.dtype == DType::kI64) {
      throw ConfigError("checkpoint tensor '" + name + "' has integer dtype");
    }
    dst.data() = t.f64;
  }
}

}  // namespace pf
