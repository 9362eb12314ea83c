// Minimal 8-bit RGB PNG writer (filter 0, zlib-compressed IDAT). Output
// bytes are a pure function of the pixel data.
#pragma once

#include <zlib.h>

#include <cstdint>
#include <filesystem>
#include <fstream>

#include "mpmri/explain.hpp"

namespace mpmri {
namespace detail {

inline void png_u32be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

inline void png_chunk(std::vector<std::uint8_t>& out, const char type[4], const std::vector<std::uint8_t>& payload) {
  png_u32be(out, static_cast<std::uint32_t>(payload.size()));
  const std::size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const auto crc = crc32(0, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
  png_u32be(out, static_cast<std::uint32_t>(crc));
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_png(const RGBImage& img) {
  require(img.rows > 0 && img.cols > 0, Err::ShapeMismatch, "empty image");

  // One filter byte (0 = none) per scanline, then raw RGB bytes.
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(img.rows) * (1 + static_cast<std::size_t>(img.cols) * 3));
  for (int r = 0; r < img.rows; ++r) {
    raw.push_back(0);
    raw.insert(raw.end(), img.at(r, 0), img.at(r, 0) + static_cast<std::size_t>(img.cols) * 3);
  }

  uLongf comp_size = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> comp(comp_size);
  const int rc = compress2(comp.data(), &comp_size, raw.data(), static_cast<uLong>(raw.size()), 9);
  require(rc == Z_OK, Err::UnwritablePath, "png compression failed");
  comp.resize(comp_size);

  std::vector<std::uint8_t> out{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<std::uint8_t> ihdr;
  detail::png_u32be(ihdr, static_cast<std::uint32_t>(img.cols));
  detail::png_u32be(ihdr, static_cast<std::uint32_t>(img.rows));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(2);  // color type: truecolor
  ihdr.push_back(0);  // compression
  ihdr.push_back(0);  // filter method
  ihdr.push_back(0);  // no interlace
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", comp);
  detail::png_chunk(out, "IEND", {});
  return out;
}

inline void write_png(const RGBImage& img, const std::filesystem::path& path) {
  const auto bytes = encode_png(img);
  std::ofstream out(path, std::ios::binary);
  require(out.good(), Err::UnwritablePath, "cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(out.good(), Err::UnwritablePath, "short write to '" + path.string() + "'");
}

}  // namespace mpmri
