#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "locfuse/binary.hpp"
#include "locfuse/error.hpp"
#include "locfuse/flow.hpp"

namespace locfuse {

Image read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  auto token = [&]() {
    std::string tok;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!tok.empty()) break;
        continue;
      }
      tok += c;
    }
    return tok;
  };
  if (token() != "P5") fail(ErrorCode::kIo, path.string() + ": not a binary PGM");
  const int w = std::stoi(token());
  const int h = std::stoi(token());
  const int maxval = std::stoi(token());
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) fail(ErrorCode::kIo, path.string() + ": unsupported PGM");
  std::vector<unsigned char> raw(std::size_t(w) * h);
  in.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
  if (!in) fail(ErrorCode::kIo, path.string() + ": truncated PGM");
  Image img(w, h);
  for (std::size_t i = 0; i < raw.size(); ++i) img.pixels[i] = raw[i] / double(maxval);
  return img;
}

void write_pgm(const std::filesystem::path& path, const Image& image) {
  image.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  std::vector<unsigned char> raw(image.pixels.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    raw[i] = static_cast<unsigned char>(std::lround(std::clamp(image.pixels[i], 0.0, 1.0) * 255.0));
  }
  out.write(reinterpret_cast<const char*>(raw.data()), std::streamsize(raw.size()));
}

FlowField read_flow(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  binary::Reader reader(in, path.string());
  reader.expect_magic("PFLW");
  const auto w = reader.u32();
  const auto h = reader.u32();
  if (w == 0 || h == 0 || std::uint64_t(w) * h > (1ull << 28)) fail(ErrorCode::kIo, path.string() + ": bad flow size");
  FlowField field{int(w), int(h)};
  for (auto& x : field.u) x = reader.f32();
  for (auto& x : field.v) x = reader.f32();
  return field;
}

void write_flow(const std::filesystem::path& path, const FlowField& field) {
  field.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  binary::Writer writer(out);
  writer.magic("PFLW");
  writer.u32(std::uint32_t(field.width));
  writer.u32(std::uint32_t(field.height));
  for (double x : field.u) writer.f32(float(x));
  for (double x : field.v) writer.f32(float(x));
}

}  // namespace locfuse
