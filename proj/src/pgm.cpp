#include "taft/pgm.hpp"

#include <fstream>

#include "taft/errors.hpp"

namespace taft {

void write_pgm(const std::string& path, int width, int height,
               const std::vector<uint8_t>& pixels) {
  if (width < 1 || height < 1 ||
      pixels.size() != static_cast<size_t>(width) * static_cast<size_t>(height)) {
    throw DimensionError("write_pgm: pixel count does not match extents");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("write_pgm: cannot open " + path);
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
  if (!out) throw Error("write_pgm: short write to " + path);
}

namespace {

int read_pgm_int(std::istream& in) {
  // Skips whitespace and '#' comment lines between header tokens.
  int c = in.peek();
  while (c == '#' || std::isspace(c)) {
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else {
      in.get();
    }
    c = in.peek();
  }
  int value = 0;
  if (!(in >> value)) throw Error("read_pgm: malformed header");
  return value;
}

}  // namespace

std::vector<uint8_t> read_pgm(const std::string& path, int& width, int& height) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("read_pgm: cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5") throw Error("read_pgm: not a binary PGM: " + path);
  width = read_pgm_int(in);
  height = read_pgm_int(in);
  const int maxval = read_pgm_int(in);
  if (width < 1 || height < 1 || maxval != 255) {
    throw Error("read_pgm: unsupported extents or maxval in " + path);
  }
  in.get();
  std::vector<uint8_t> pixels(static_cast<size_t>(width) * static_cast<size_t>(height));
  in.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(pixels.size())) {
    throw Error("read_pgm: truncated pixel data in " + path);
  }
  return pixels;
}

}  // namespace taft
