// SPDX-License-Identifier: Apache-2.0

#include "bflab/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "bflab/error.hpp"

namespace bflab::checkpoint {
namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

constexpr std::uint8_t kKindQuant = 0;
constexpr std::uint8_t kKindFloat = 1;
constexpr const char* kMetaName = "meta.config";

class Writer {
 public:
  template <class T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  void put_header(const std::string& name, std::uint8_t kind,
                  const std::vector<std::size_t>& dims) {
    if (name.size() > 0xffff) throw FormatError("tensor name too long");
    put(static_cast<std::uint16_t>(name.size()));
    put_bytes(name.data(), name.size());
    put(kind);
    put(static_cast<std::uint8_t>(dims.size()));
    for (auto d : dims) put(static_cast<std::uint32_t>(d));
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::size_t end)
      : bytes_(bytes), end_(end) {}

  template <class T>
  T get(const char* field) {
    need(sizeof(T), field);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void get_bytes(void* out, std::size_t n, const char* field) {
    need(n, field);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* field) {
    if (pos_ + n > end_) {
      throw FormatError(std::string("checkpoint truncated while reading ") +
                        field);
    }
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  return static_cast<std::uint32_t>(
      ::crc32(::crc32(0L, Z_NULL, 0), data, static_cast<uInt>(n)));
}

}  // namespace

std::vector<std::uint8_t> serialize(const model::ParamSet& params) {
  Writer w;
  w.put_bytes(kMagic, 4);
  w.put(kVersion);
  w.put(static_cast<std::uint32_t>(params.quantized.size() +
                                   params.floats.size() + 1));
  for (const auto& q : params.quantized) {
    w.put_header(q.name, kKindQuant, q.dims);
    w.put(q.scale);
    w.put_bytes(q.codes.data(), q.codes.size());
  }
  for (const auto& f : params.floats) {
    w.put_header(f.name, kKindFloat, f.value.dims());
    w.put_bytes(f.value.data(), f.value.size() * sizeof(double));
  }
  const auto& c = params.config;
  const std::vector<double> meta = {
      static_cast<double>(c.vocab),   static_cast<double>(c.context),
      static_cast<double>(c.n_layer), static_cast<double>(c.n_head),
      static_cast<double>(c.d_model), static_cast<double>(c.ff_width()),
      static_cast<double>(c.seed)};
  w.put_header(kMetaName, kKindFloat, {meta.size()});
  w.put_bytes(meta.data(), meta.size() * sizeof(double));
  const std::uint32_t crc = crc32_of(w.bytes().data(), w.bytes().size());
  w.put(crc);
  return std::move(w.bytes());
}

model::ParamSet deserialize(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16) throw FormatError("checkpoint truncated: header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("bad magic: expected BFLP");
  }
  const std::size_t body = bytes.size() - 4;
  Reader r(bytes, body);
  char magic[4];
  r.get_bytes(magic, 4, "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) {
    throw FormatError("unsupported version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>("tensor_count");
  model::ParamSet p;
  std::vector<double> meta;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint16_t>("name_len");
    std::string name(name_len, '\0');
    r.get_bytes(name.data(), name_len, "name");
    const auto kind = r.get<std::uint8_t>("kind");
    const auto ndim = r.get<std::uint8_t>("ndim");
    if (ndim == 0) throw FormatError("tensor '" + name + "' has ndim 0");
    std::vector<std::size_t> dims(ndim);
    for (auto& d : dims) {
      d = r.get<std::uint32_t>("dims");
      if (d == 0) throw FormatError("tensor '" + name + "' has a zero dim");
    }
    const std::size_t n = num::element_count(dims);
    if (kind == kKindQuant) {
      quant::QuantTensor q;
      q.name = name;
      q.dims = dims;
      q.scale = r.get<double>("scale");
      if (!(q.scale > 0.0)) {
        throw FormatError("tensor '" + name + "' has non-positive scale");
      }
      q.codes.resize(n);
      r.get_bytes(q.codes.data(), n, "codes");
      p.quantized.push_back(std::move(q));
    } else if (kind == kKindFloat) {
      std::vector<double> values(n);
      r.get_bytes(values.data(), n * sizeof(double), "values");
      if (name == kMetaName) {
        meta = std::move(values);
      } else {
        p.floats.push_back({name, num::DenseTensor(dims, std::move(values))});
      }
    } else {
      throw FormatError("tensor '" + name + "' has unknown kind " +
                        std::to_string(kind));
    }
  }
  if (r.pos() != body) throw FormatError("trailing bytes before crc");
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body, 4);
  if (stored != crc32_of(bytes.data(), body)) {
    throw FormatError("crc mismatch");
  }
  // Older files lack the trailing seed entry.
  if (meta.size() != 6 && meta.size() != 7) {
    throw FormatError("missing or malformed meta.config");
  }
  p.config.vocab = static_cast<std::size_t>(meta[0]);
  p.config.context = static_cast<std::size_t>(meta[1]);
  p.config.n_layer = static_cast<std::size_t>(meta[2]);
  p.config.n_head = static_cast<std::size_t>(meta[3]);
  p.config.d_model = static_cast<std::size_t>(meta[4]);
  p.config.d_ff = static_cast<std::size_t>(meta[5]);
  p.config.seed = meta.size() == 7 ? static_cast<std::uint64_t>(meta[6]) : 0;
  auto by_name = [](const auto& a, const auto& b) { return a.name < b.name; };
  std::sort(p.quantized.begin(), p.quantized.end(), by_name);
  std::sort(p.floats.begin(), p.floats.end(), by_name);
  return p;
}

void save_checkpoint(const model::ParamSet& params,
                     const std::filesystem::path& path) {
  const auto bytes = serialize(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed: " + path.string());
}

model::ParamSet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

std::vector<quant::BitLocation> diff(const model::ParamSet& a,
                                     const model::ParamSet& b) {
  if (a.quantized.size() != b.quantized.size() || a.floats != b.floats) {
    throw FormatError("checkpoints differ in structure or float tensors");
  }
  std::vector<quant::BitLocation> out;
  for (std::size_t t = 0; t < a.quantized.size(); ++t) {
    const auto& qa = a.quantized[t];
    const auto& qb = b.quantized[t];
    if (qa.name != qb.name || qa.dims != qb.dims || qa.scale != qb.scale) {
      throw FormatError("tensor '" + qa.name + "' differs beyond its codes");
    }
    for (std::size_t i = 0; i < qa.codes.size(); ++i) {
      const auto x = static_cast<std::uint8_t>(qa.codes[i]) ^
                     static_cast<std::uint8_t>(qb.codes[i]);
      for (int bit = 0; bit < quant::kBitsPerCode; ++bit) {
        if (x & (1u << bit)) out.push_back({qa.name, i, bit});
      }
    }
  }
  return out;
}

}  // namespace bflab::checkpoint
