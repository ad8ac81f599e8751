#include <cstring>

#include "gradgen/util.hpp"
#include "gradgen/vlm.hpp"

namespace gradgen::vlm {

namespace {

constexpr char kMagic[4] = {'D', 'G', 'W', 'T'};
constexpr uint32_t kVersion = 1;

void put_u16(std::string& out, uint16_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char(v >> 8));
}

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double d) {
  uint64_t bits;
  std::memcpy(&bits, &d, 8);
  for (int i = 0; i < 8; ++i) out.push_back(char((bits >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& s;
  size_t off = 0;
  explicit Reader(const std::string& str) : s(str) {}
  void need(size_t n) const {
    if (off + n > s.size())
      throw std::runtime_error("checkpoint: truncated file (wanted " +
                               std::to_string(n) + " bytes at offset " +
                               std::to_string(off) + ")");
  }
  uint16_t u16() {
    need(2);
    uint16_t v = uint16_t(uint8_t(s[off])) | uint16_t(uint8_t(s[off + 1])) << 8;
    off += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(s[off + size_t(i)])) << (8 * i);
    off += 4;
    return v;
  }
  uint8_t u8() {
    need(1);
    return uint8_t(s[off++]);
  }
  double f64() {
    need(8);
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= uint64_t(uint8_t(s[off + size_t(i)])) << (8 * i);
    off += 8;
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string out = s.substr(off, n);
    off += n;
    return out;
  }
};

void write_tensor(std::string& out, const std::string& name, const Shape& shape,
                  const std::vector<double>& data) {
  put_u16(out, uint16_t(name.size()));
  out += name;
  out.push_back(char(shape.size()));
  for (int64_t d : shape) put_u32(out, uint32_t(d));
  for (double v : data) put_f64(out, v);
}

}  // namespace

void save_checkpoint(const EncoderParams& params, const std::string& path) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, uint32_t(params.t.size() + params.meta.size()));
  for (const auto& [name, t] : params.t) write_tensor(out, name, t.shape, *t.data);
  for (const auto& [key, v] : params.meta) write_tensor(out, "meta." + key, {}, {v});
  spit(path, out);
}

EncoderParams load_checkpoint(const std::string& path) {
  const std::string s = slurp(path);
  Reader r(s);
  if (r.bytes(4) != std::string(kMagic, 4))
    throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
  const uint32_t version = r.u32();
  if (version != kVersion)
    throw std::runtime_error("checkpoint: version mismatch, found " +
                             std::to_string(version) + ", expected " +
                             std::to_string(kVersion));
  const uint32_t count = r.u32();

  EncoderParams p;
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t nlen = r.u16();
    const std::string name = r.bytes(nlen);
    const uint8_t rank = r.u8();
    Shape shape;
    int64_t n = 1;
    for (int d = 0; d < rank; ++d) {
      shape.push_back(int64_t(r.u32()));
      n *= shape.back();
    }
    std::vector<double> data(static_cast<size_t>(n), 0.0);
    for (int64_t k = 0; k < n; ++k) data[size_t(k)] = r.f64();
    if (name.rfind("meta.", 0) == 0) {
      if (n != 1) throw std::runtime_error("checkpoint: meta entry must be scalar");
      p.meta[name.substr(5)] = data[0];
    } else {
      p.t[name] = constant(shape, std::move(data));
    }
  }
  for (const std::string& required : EncoderParams::tensor_names())
    if (!p.t.count(required))
      throw std::runtime_error("checkpoint: missing tensor '" + required + "' in '" +
                               path + "'");
  return p;
}

}  // namespace gradgen::vlm
