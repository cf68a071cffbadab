#include "crossmpi/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "crossmpi/errors.hpp"

namespace crossmpi {

namespace {

// Reads one whitespace-delimited header token, skipping '#' comments.
std::string header_token(const std::string& b, std::size_t& pos) {
  for (;;) {
    while (pos < b.size() && std::isspace(static_cast<unsigned char>(b[pos]))) ++pos;
    if (pos < b.size() && b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  const std::size_t start = pos;
  while (pos < b.size() && !std::isspace(static_cast<unsigned char>(b[pos]))) ++pos;
  if (start == pos) throw Error(ErrorCode::kFormat, "image: truncated header");
  return b.substr(start, pos - start);
}

std::size_t header_number(const std::string& b, std::size_t& pos, const char* what) {
  const std::string tok = header_token(b, pos);
  if (!std::all_of(tok.begin(), tok.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }) ||
      tok.size() > 9)
    throw Error(ErrorCode::kFormat, std::string("image: bad ") + what + " '" + tok + "'");
  return std::stoul(tok);
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

Tensor decode_image(const std::string& b) {
  std::size_t pos = 0;
  const std::string magic = header_token(b, pos);
  std::size_t C = 0;
  if (magic == "P5") C = 1;
  else if (magic == "P6") C = 3;
  else throw Error(ErrorCode::kFormat, "image: unsupported magic '" + magic + "'");
  const std::size_t W = header_number(b, pos, "width");
  const std::size_t H = header_number(b, pos, "height");
  const std::size_t maxval = header_number(b, pos, "maxval");
  if (W == 0 || H == 0) throw Error(ErrorCode::kFormat, "image: zero dimension");
  if (maxval != 255) throw Error(ErrorCode::kFormat, "image: maxval " + std::to_string(maxval) + " is not 255");
  if (pos >= b.size() || !std::isspace(static_cast<unsigned char>(b[pos])))
    throw Error(ErrorCode::kFormat, "image: missing separator before payload");
  ++pos;
  const std::size_t need = C * H * W;
  if (b.size() - pos < need) throw Error(ErrorCode::kFormat, "image: truncated payload");
  Tensor img({C, H, W}, 0.0);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      for (std::size_t c = 0; c < C; ++c)
        img(c, i, j) = static_cast<unsigned char>(b[pos + (i * W + j) * C + c]) / 255.0;
  return img;
}

Tensor read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kMissingInput, "image: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_image(ss.str());
}

std::string encode_image(const Tensor& img) {
  if (img.rank() != 3 || (img.dim(0) != 1 && img.dim(0) != 3))
    throw std::invalid_argument("encode_image: need a [1|3,H,W] tensor, got " + shape_str(img.shape()));
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  std::string out = (C == 1 ? "P5\n" : "P6\n") + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  out.reserve(out.size() + C * H * W);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      for (std::size_t c = 0; c < C; ++c) out.push_back(static_cast<char>(to_byte(img(c, i, j))));
  return out;
}

void write_image(const std::filesystem::path& path, const Tensor& image) {
  const std::string bytes = encode_image(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "image: cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "image: write failed for " + path.string());
}

Tensor quantize8(const Tensor& image) {
  Tensor out = image;
  for (auto& v : out.storage()) v = to_byte(v) / 255.0;
  return out;
}

}  // namespace crossmpi
