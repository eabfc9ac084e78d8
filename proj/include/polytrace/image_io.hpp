#pragma once

// Binary PPM/PGM image files (8-bit) and a small named-tensor blob format.
// Images map [-1,1] <-> [0,255] with half-up rounding; 0 maps to 128.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "polytrace/tensor.hpp"

namespace polytrace {

inline int to_u8(double v, double lo, double hi) {
  double t = (v - lo) / (hi - lo) * 255.0;
  if (t < 0) t = 0;
  if (t > 255) t = 255;
  return static_cast<int>(std::floor(t + 0.5));
}

// [C,H,W] in [lo,hi] -> 8-bit file; C=3 writes P6, C=1 writes P5.
template <class R>
void write_image(const std::string& path, const Tensor<R>& img, double lo = -1.0,
                 double hi = 1.0) {
  require(img.rank() == 3 && (img.dim(0) == 1 || img.dim(0) == 3),
          "write_image: expected [1|3,H,W]");
  const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write image: " + path);
  f << (C == 3 ? "P6" : "P5") << "\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(W) * C);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c)
        row[static_cast<std::size_t>(x) * C + c] = static_cast<unsigned char>(
            to_u8(static_cast<double>(img[(static_cast<std::int64_t>(c) * H + y) * W + x]),
                  lo, hi));
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw IoError("short write: " + path);
}

// Reads P5/P6 (maxval 255) into [C,H,W] with values in [0,255].
template <class R>
Tensor<R> read_image(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read image: " + path);
  auto next_token = [&]() -> std::string {
    std::string tok;
    int ch;
    while ((ch = f.get()) != EOF) {
      if (ch == '#') {
        while ((ch = f.get()) != EOF && ch != '\n') {
        }
        continue;
      }
      if (std::isspace(ch)) {
        if (!tok.empty()) return tok;
        continue;
      }
      tok.push_back(static_cast<char>(ch));
    }
    return tok;
  };
  const std::string magic = next_token();
  if (magic != "P6" && magic != "P5") throw IoError("unsupported image format in " + path);
  const int C = magic == "P6" ? 3 : 1;
  const int W = std::stoi(next_token());
  const int H = std::stoi(next_token());
  const int maxval = std::stoi(next_token());
  if (maxval != 255) throw IoError("unsupported maxval in " + path);
  std::vector<unsigned char> raw(static_cast<std::size_t>(W) * H * C);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (f.gcount() != static_cast<std::streamsize>(raw.size()))
    throw IoError("truncated image: " + path);
  Tensor<R> img({C, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c)
        img[(static_cast<std::int64_t>(c) * H + y) * W + x] =
            static_cast<R>(raw[(static_cast<std::size_t>(y) * W + x) * C + c]);
  return img;
}

// Bilinear resize of [C,H,W].
template <class R>
Tensor<R> resize_bilinear(const Tensor<R>& img, int oh, int ow) {
  const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (H == oh && W == ow) return img;
  Tensor<R> out({C, oh, ow});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        const double sy = (y + 0.5) * H / oh - 0.5;
        const double sx = (x + 0.5) * W / ow - 0.5;
        const int y0 = std::max(0, std::min(H - 1, static_cast<int>(std::floor(sy))));
        const int x0 = std::max(0, std::min(W - 1, static_cast<int>(std::floor(sx))));
        const int y1 = std::min(H - 1, y0 + 1), x1 = std::min(W - 1, x0 + 1);
        const double fy = std::max(0.0, std::min(1.0, sy - y0));
        const double fx = std::max(0.0, std::min(1.0, sx - x0));
        const double v00 = img[(static_cast<std::int64_t>(c) * H + y0) * W + x0];
        const double v01 = img[(static_cast<std::int64_t>(c) * H + y0) * W + x1];
        const double v10 = img[(static_cast<std::int64_t>(c) * H + y1) * W + x0];
        const double v11 = img[(static_cast<std::int64_t>(c) * H + y1) * W + x1];
        out[(static_cast<std::int64_t>(c) * oh + y) * ow + x] = static_cast<R>(
            (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11));
      }
  return out;
}

// ---------------------------------------------------------------------------
// Raw tensor blobs: magic, dtype width, rank, dims, little-endian payload.

template <class R>
void write_tensor(std::ostream& f, const Tensor<R>& t) {
  f.write("PTTN", 4);
  const std::uint32_t width = sizeof(R);
  const std::uint32_t rank = static_cast<std::uint32_t>(t.shape.size());
  f.write(reinterpret_cast<const char*>(&width), 4);
  f.write(reinterpret_cast<const char*>(&rank), 4);
  for (int d : t.shape) {
    const std::uint32_t dd = static_cast<std::uint32_t>(d);
    f.write(reinterpret_cast<const char*>(&dd), 4);
  }
  f.write(reinterpret_cast<const char*>(t.ptr()),
          static_cast<std::streamsize>(sizeof(R) * t.data.size()));
}

template <class R>
Tensor<R> read_tensor(std::istream& f) {
  char magic[4];
  f.read(magic, 4);
  if (!f || std::string(magic, 4) != "PTTN") throw IoError("bad tensor blob magic");
  std::uint32_t width = 0, rank = 0;
  f.read(reinterpret_cast<char*>(&width), 4);
  f.read(reinterpret_cast<char*>(&rank), 4);
  if (width != sizeof(R)) throw IoError("tensor blob element width mismatch");
  if (rank > 8) throw IoError("tensor blob rank out of range");
  std::vector<int> shape(rank);
  for (auto& d : shape) {
    std::uint32_t dd = 0;
    f.read(reinterpret_cast<char*>(&dd), 4);
    d = static_cast<int>(dd);
  }
  Tensor<R> t(shape);
  f.read(reinterpret_cast<char*>(t.ptr()),
         static_cast<std::streamsize>(sizeof(R) * t.data.size()));
  if (!f) throw IoError("truncated tensor blob");
  return t;
}

template <class R>
void write_tensor_file(const std::string& path, const Tensor<R>& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write tensor: " + path);
  write_tensor(f, t);
  if (!f) throw IoError("short write: " + path);
}

template <class R>
Tensor<R> read_tensor_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read tensor: " + path);
  return read_tensor<R>(f);
}

}  // namespace polytrace
