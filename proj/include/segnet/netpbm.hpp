#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

namespace segnet {

/// Raised for malformed or truncated Netpbm data; the message carries the byte offset.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " at byte " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

struct GrayImage {
  std::size_t width = 0, height = 0;
  unsigned maxval = 255;
  std::vector<std::uint8_t> pixels;
};

inline std::string encode_pgm(const GrayImage& img) {
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n" +
                    std::to_string(img.maxval) + "\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

/// 8-bit P6 from interleaved RGB.
inline std::string encode_ppm(std::size_t width, std::size_t height, const std::vector<std::uint8_t>& rgb) {
  if (rgb.size() != width * height * 3) throw std::invalid_argument("encode_ppm: wrong buffer length");
  std::string out = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(rgb.data()), rgb.size());
  return out;
}

namespace detail {

class PnmHeaderReader {
 public:
  explicit PnmHeaderReader(const std::string& buf) : buf_(buf) {}

  void skip_space_and_comments() {
    while (pos_ < buf_.size()) {
      const char c = buf_[pos_];
      if (c == '#') {
        while (pos_ < buf_.size() && buf_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  unsigned long number(const char* field) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    unsigned long v = 0;
    while (pos_ < buf_.size() && std::isdigit(static_cast<unsigned char>(buf_[pos_]))) {
      v = v * 10 + static_cast<unsigned long>(buf_[pos_] - '0');
      if (v > 1'000'000) throw FormatError(std::string("pnm: ") + field + " too large", start);
      ++pos_;
    }
    if (pos_ == start) throw FormatError(std::string("pnm: expected ") + field, start);
    return v;
  }

  std::size_t pos() const { return pos_; }
  void advance(std::size_t n) { pos_ += n; }

 private:
  const std::string& buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Parses binary P5 with maxval <= 255.
inline GrayImage decode_pgm(const std::string& buf) {
  if (buf.size() < 2 || buf[0] != 'P' || buf[1] != '5') throw FormatError("pgm: missing P5 magic", 0);
  detail::PnmHeaderReader r(buf);
  r.advance(2);
  GrayImage img;
  img.width = r.number("width");
  img.height = r.number("height");
  const std::size_t maxval_at = r.pos();
  img.maxval = static_cast<unsigned>(r.number("maxval"));
  if (img.maxval == 0 || img.maxval > 255) throw FormatError("pgm: unsupported maxval " + std::to_string(img.maxval), maxval_at);
  if (r.pos() >= buf.size() || !std::isspace(static_cast<unsigned char>(buf[r.pos()])))
    throw FormatError("pgm: header not terminated by whitespace", r.pos());
  r.advance(1);
  const std::size_t need = img.width * img.height;
  if (buf.size() - r.pos() < need)
    throw FormatError("pgm: truncated payload, expected " + std::to_string(need) + " bytes, found " +
                          std::to_string(buf.size() - r.pos()),
                      buf.size());
  if (buf.size() - r.pos() > need)
    throw FormatError("pgm: trailing data after payload", r.pos() + need);
  img.pixels.assign(buf.begin() + static_cast<std::ptrdiff_t>(r.pos()), buf.end());
  for (std::size_t i = 0; i < need; ++i)
    if (img.pixels[i] > img.maxval)
      throw FormatError("pgm: value " + std::to_string(img.pixels[i]) + " exceeds maxval", r.pos() + i);
  return img;
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("failed writing " + path);
}

}  // namespace segnet
