#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "gradgen/render.hpp"

namespace gradgen {

namespace {

void put_u32be(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v >> 24));
  out.push_back(uint8_t(v >> 16));
  out.push_back(uint8_t(v >> 8));
  out.push_back(uint8_t(v));
}

void put_chunk(std::vector<uint8_t>& out, const char type[5],
               const std::vector<uint8_t>& data) {
  put_u32be(out, uint32_t(data.size()));
  const size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const uLong crc = crc32(0, out.data() + start, uInt(out.size() - start));
  put_u32be(out, uint32_t(crc));
}

void check_image(const Tensor& image) {
  if (image.shape.size() != 3 || image.shape[2] != 3)
    throw std::invalid_argument("image must be (H,W,3), got " + shape_str(image.shape));
  for (int64_t i = 0; i < image.size(); ++i) {
    const double v = image.at(i);
    if (!(v >= 0.0 && v <= 1.0))
      throw std::invalid_argument("image value " + std::to_string(v) + " out of [0,1]");
  }
}

}  // namespace

std::vector<uint8_t> quantize_image(const Tensor& image) {
  check_image(image);
  std::vector<uint8_t> q(size_t(image.size()));
  for (int64_t i = 0; i < image.size(); ++i)
    q[size_t(i)] = uint8_t(std::lround(255.0 * image.at(i)));
  return q;
}

Tensor image_from_bytes(const std::vector<uint8_t>& rgb, int h, int w) {
  if (int64_t(rgb.size()) != int64_t(h) * w * 3)
    throw std::invalid_argument("image_from_bytes: size mismatch");
  std::vector<double> v(rgb.size());
  for (size_t i = 0; i < rgb.size(); ++i) v[i] = double(rgb[i]) / 255.0;
  return constant({h, w, 3}, std::move(v));
}

std::vector<uint8_t> png_bytes(const Tensor& image) {
  const std::vector<uint8_t> q = quantize_image(image);
  const int h = int(image.shape[0]), w = int(image.shape[1]);

  std::vector<uint8_t> raw;
  raw.reserve(size_t(h) * (size_t(w) * 3 + 1));
  for (int r = 0; r < h; ++r) {
    raw.push_back(0);  // filter: none
    raw.insert(raw.end(), q.begin() + size_t(r) * w * 3,
               q.begin() + size_t(r + 1) * w * 3);
  }
  uLongf bound = compressBound(uLong(raw.size()));
  std::vector<uint8_t> compressed(bound);
  if (compress2(compressed.data(), &bound, raw.data(), uLong(raw.size()), 6) != Z_OK)
    throw std::runtime_error("png: deflate failed");
  compressed.resize(bound);

  std::vector<uint8_t> out{137, 80, 78, 71, 13, 10, 26, 10};
  std::vector<uint8_t> ihdr;
  put_u32be(ihdr, uint32_t(w));
  put_u32be(ihdr, uint32_t(h));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // truecolor
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", compressed);
  put_chunk(out, "IEND", {});
  return out;
}

void export_png(const Tensor& image, const std::string& path) {
  const auto bytes = png_bytes(image);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("png: cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f) throw std::runtime_error("png: write failed for '" + path + "'");
}

namespace {

uint32_t read_u32be(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) |
         uint32_t(p[3]);
}

uint8_t paeth(uint8_t a, uint8_t b, uint8_t c) {
  const int p = int(a) + int(b) - int(c);
  const int pa = std::abs(p - int(a)), pb = std::abs(p - int(b)), pc = std::abs(p - int(c));
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace

Tensor import_png(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("png: cannot open '" + path + "'");
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)),
                           std::istreambuf_iterator<char>());
  static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (buf.size() < 8 || std::memcmp(buf.data(), sig, 8) != 0)
    throw std::runtime_error("png: bad signature in '" + path + "'");

  int w = 0, h = 0;
  std::vector<uint8_t> idat;
  size_t off = 8;
  while (off + 8 <= buf.size()) {
    const uint32_t len = read_u32be(buf.data() + off);
    if (off + 12 + len > buf.size()) throw std::runtime_error("png: truncated chunk");
    const char* type = reinterpret_cast<const char*>(buf.data() + off + 4);
    const uint8_t* data = buf.data() + off + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      w = int(read_u32be(data));
      h = int(read_u32be(data + 4));
      if (data[8] != 8 || data[9] != 2 || data[12] != 0)
        throw std::runtime_error("png: only 8-bit non-interlaced RGB supported");
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    off += 12 + len;
  }
  if (w <= 0 || h <= 0 || idat.empty()) throw std::runtime_error("png: missing data");

  const size_t stride = size_t(w) * 3;
  std::vector<uint8_t> raw(size_t(h) * (stride + 1));
  uLongf rawlen = uLongf(raw.size());
  if (uncompress(raw.data(), &rawlen, idat.data(), uLong(idat.size())) != Z_OK ||
      rawlen != raw.size())
    throw std::runtime_error("png: inflate failed");

  std::vector<uint8_t> px(size_t(h) * stride);
  for (int r = 0; r < h; ++r) {
    const uint8_t filter = raw[size_t(r) * (stride + 1)];
    const uint8_t* src = raw.data() + size_t(r) * (stride + 1) + 1;
    uint8_t* dst = px.data() + size_t(r) * stride;
    const uint8_t* up = r > 0 ? px.data() + size_t(r - 1) * stride : nullptr;
    for (size_t i = 0; i < stride; ++i) {
      const uint8_t left = i >= 3 ? dst[i - 3] : 0;
      const uint8_t above = up ? up[i] : 0;
      const uint8_t corner = (up && i >= 3) ? up[i - 3] : 0;
      switch (filter) {
        case 0: dst[i] = src[i]; break;
        case 1: dst[i] = uint8_t(src[i] + left); break;
        case 2: dst[i] = uint8_t(src[i] + above); break;
        case 3: dst[i] = uint8_t(src[i] + (int(left) + int(above)) / 2); break;
        case 4: dst[i] = uint8_t(src[i] + paeth(left, above, corner)); break;
        default: throw std::runtime_error("png: unknown filter");
      }
    }
  }
  return image_from_bytes(px, h, w);
}

// --- gif ----------------------------------------------------------------------

namespace {

// 216-color web cube plus 40 grays.
uint8_t palette_index(uint8_t r, uint8_t g, uint8_t b) {
  const int r6 = (int(r) + 25) / 51, g6 = (int(g) + 25) / 51, b6 = (int(b) + 25) / 51;
  const int cube = r6 * 36 + g6 * 6 + b6;
  const int cr = r6 * 51, cg = g6 * 51, cb = b6 * 51;
  const long cube_err = long(r - cr) * (r - cr) + long(g - cg) * (g - cg) +
                        long(b - cb) * (b - cb);
  const int gl = (int(r) + int(g) + int(b)) / 3;
  const int gi = (gl * 39 + 127) / 255;
  const int gv = gi * 255 / 39;
  const long gray_err = long(r - gv) * (r - gv) + long(g - gv) * (g - gv) +
                        long(b - gv) * (b - gv);
  return gray_err < cube_err ? uint8_t(216 + gi) : uint8_t(cube);
}

void gif_palette(std::vector<uint8_t>& out) {
  for (int r = 0; r < 6; ++r)
    for (int g = 0; g < 6; ++g)
      for (int b = 0; b < 6; ++b) {
        out.push_back(uint8_t(r * 51));
        out.push_back(uint8_t(g * 51));
        out.push_back(uint8_t(b * 51));
      }
  for (int i = 0; i < 40; ++i) {
    const uint8_t v = uint8_t(i * 255 / 39);
    out.push_back(v);
    out.push_back(v);
    out.push_back(v);
  }
}

void put_u16le(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(uint8_t(v & 0xff));
  out.push_back(uint8_t(v >> 8));
}

class LzwWriter {
 public:
  explicit LzwWriter(std::vector<uint8_t>& out) : out_(out) {}

  void encode(const std::vector<uint8_t>& indices) {
    out_.push_back(8);  // min code size
    reset_dict();
    emit(kClear);
    int32_t prefix = -1;
    for (uint8_t c : indices) {
      if (prefix < 0) {
        prefix = c;
        continue;
      }
      auto it = dict_.find({prefix, c});
      if (it != dict_.end()) {
        prefix = it->second;
      } else {
        emit(uint16_t(prefix));
        if (next_code_ >= 4096) {
          emit(kClear);
          reset_dict();
        } else {
          dict_[{prefix, c}] = next_code_++;
          if (next_code_ - 1 == (1 << code_bits_) && code_bits_ < 12) ++code_bits_;
        }
        prefix = c;
      }
    }
    if (prefix >= 0) emit(uint16_t(prefix));
    emit(kEoi);
    flush_bits();
    flush_block();
    out_.push_back(0);  // block terminator
  }

 private:
  static constexpr uint16_t kClear = 256, kEoi = 257;

  void reset_dict() {
    dict_.clear();
    next_code_ = 258;
    code_bits_ = 9;
  }

  void emit(uint16_t code) {
    bitbuf_ |= uint32_t(code) << bitcount_;
    bitcount_ += code_bits_;
    while (bitcount_ >= 8) {
      block_.push_back(uint8_t(bitbuf_ & 0xff));
      bitbuf_ >>= 8;
      bitcount_ -= 8;
      if (block_.size() == 255) flush_block();
    }
  }

  void flush_bits() {
    if (bitcount_ > 0) {
      block_.push_back(uint8_t(bitbuf_ & 0xff));
      bitbuf_ = 0;
      bitcount_ = 0;
      if (block_.size() == 255) flush_block();
    }
  }

  void flush_block() {
    if (block_.empty()) return;
    out_.push_back(uint8_t(block_.size()));
    out_.insert(out_.end(), block_.begin(), block_.end());
    block_.clear();
  }

  std::vector<uint8_t>& out_;
  std::map<std::pair<int32_t, uint8_t>, uint16_t> dict_;
  uint16_t next_code_ = 258;
  int code_bits_ = 9;
  uint32_t bitbuf_ = 0;
  int bitcount_ = 0;
  std::vector<uint8_t> block_;
};

}  // namespace

void export_gif(const std::vector<Tensor>& frames, const std::string& path,
                int delay_cs) {
  if (frames.empty()) throw std::invalid_argument("gif: no frames");
  const int h = int(frames[0].shape[0]), w = int(frames[0].shape[1]);

  std::vector<uint8_t> out;
  const char* hdr = "GIF89a";
  out.insert(out.end(), hdr, hdr + 6);
  put_u16le(out, uint16_t(w));
  put_u16le(out, uint16_t(h));
  out.push_back(0xF7);  // global table, 256 entries
  out.push_back(0);
  out.push_back(0);
  gif_palette(out);

  // loop forever
  const uint8_t netscape[] = {0x21, 0xFF, 0x0B, 'N', 'E', 'T', 'S', 'C', 'A', 'P',
                              'E',  '2',  '.',  '0', 0x03, 0x01, 0x00, 0x00, 0x00};
  out.insert(out.end(), netscape, netscape + sizeof(netscape));

  for (const Tensor& frame : frames) {
    if (int(frame.shape[0]) != h || int(frame.shape[1]) != w)
      throw std::invalid_argument("gif: frame size mismatch");
    const auto q = quantize_image(frame);
    std::vector<uint8_t> idx(size_t(h) * size_t(w));
    for (size_t i = 0; i < idx.size(); ++i)
      idx[i] = palette_index(q[i * 3], q[i * 3 + 1], q[i * 3 + 2]);

    const uint8_t gce[] = {0x21, 0xF9, 0x04, 0x04,
                           uint8_t(delay_cs & 0xff), uint8_t(delay_cs >> 8),
                           0x00, 0x00};
    out.insert(out.end(), gce, gce + sizeof(gce));
    out.push_back(0x2C);
    put_u16le(out, 0);
    put_u16le(out, 0);
    put_u16le(out, uint16_t(w));
    put_u16le(out, uint16_t(h));
    out.push_back(0);
    LzwWriter(out).encode(idx);
  }
  out.push_back(0x3B);

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("gif: cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(out.data()), std::streamsize(out.size()));
  if (!f) throw std::runtime_error("gif: write failed for '" + path + "'");
}

}  // namespace gradgen
