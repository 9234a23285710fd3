#pragma once

#include "fcmpc/core.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

namespace fcmpc {

/// Malformed or unreadable input file. Messages carry the file and line.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string where(const std::string& source, std::size_t line) {
  return source + ":" + std::to_string(line) + ": ";
}

inline std::string format_double(double v) {
  std::array<char, 32> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc{}) {
    throw std::runtime_error("failed to format number");
  }
  return std::string(buf.data(), end);
}

inline std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> out;
  std::string tok;
  while (is >> tok) {
    out.push_back(tok);
  }
  return out;
}

inline std::optional<double> parse_number(const std::string& tok) {
  double v = 0.0;
  const char* first = tok.data();
  if (!tok.empty() && tok.front() == '+') {
    ++first;
  }
  auto [ptr, ec] = std::from_chars(first, tok.data() + tok.size(), v);
  if (ec != std::errc{} || ptr != tok.data() + tok.size()) {
    return std::nullopt;
  }
  return v;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw FormatError(path.string() + ": cannot open for reading");
  }
  return in;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw FormatError(path.string() + ": cannot open for writing");
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------- PLY

/// ASCII PLY with float x, y, z and, for three channels, float red, green,
/// blue in [0, 1]. Other channel counts are written as f0, f1, ...
inline void write_ply(std::ostream& os, const ColoredPointCloud& cloud) {
  const std::size_t channels = cloud.channels();
  os << "ply\nformat ascii 1.0\nelement vertex " << cloud.size() << "\n";
  os << "property float x\nproperty float y\nproperty float z\n";
  for (std::size_t c = 0; c < channels; ++c) {
    if (channels == 3) {
      static constexpr const char* kRgb[] = {"red", "green", "blue"};
      os << "property float " << kRgb[c] << "\n";
    } else {
      os << "property float f" << c << "\n";
    }
  }
  os << "end_header\n";
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    os << detail::format_double(cloud.positions()(row, 0)) << ' ' << detail::format_double(cloud.positions()(row, 1))
       << ' ' << detail::format_double(cloud.positions()(row, 2));
    for (std::size_t c = 0; c < channels; ++c) {
      os << ' ' << detail::format_double(cloud.features()(row, static_cast<Eigen::Index>(c)));
    }
    os << '\n';
  }
}

inline void write_ply(const std::filesystem::path& path, const ColoredPointCloud& cloud) {
  auto out = detail::open_out(path);
  write_ply(out, cloud);
}

/// Reads an ASCII PLY vertex element. Required: x, y, z. Colors come from
/// red/green/blue (float/double taken as-is, integer types scaled by 1/255)
/// or f0..fN; missing colors default to mid-gray.
inline ColoredPointCloud read_ply(std::istream& in, const std::string& source = "<ply>") {
  std::string line;
  std::size_t lineno = 0;
  auto next_line = [&]() -> bool {
    if (!std::getline(in, line)) {
      return false;
    }
    ++lineno;
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    return true;
  };

  if (!next_line() || line != "ply") {
    throw FormatError(detail::where(source, lineno) + "missing 'ply' magic");
  }
  struct Property {
    std::string name;
    bool integer = false;
  };
  struct Element {
    std::string name;
    std::size_t count = 0;
    std::vector<Property> properties;
    bool has_list = false;
  };
  std::vector<Element> elements;
  bool ascii = false;
  while (true) {
    if (!next_line()) {
      throw FormatError(detail::where(source, lineno) + "unexpected end of header");
    }
    const auto tok = detail::split_ws(line);
    if (tok.empty() || tok[0] == "comment" || tok[0] == "obj_info") {
      continue;
    }
    if (tok[0] == "end_header") {
      break;
    }
    if (tok[0] == "format") {
      if (tok.size() < 2 || tok[1] != "ascii") {
        throw FormatError(detail::where(source, lineno) + "only ascii PLY is supported");
      }
      ascii = true;
    } else if (tok[0] == "element") {
      if (tok.size() != 3) {
        throw FormatError(detail::where(source, lineno) + "malformed element line");
      }
      const auto count = detail::parse_number(tok[2]);
      if (!count || *count < 0 || *count != std::floor(*count)) {
        throw FormatError(detail::where(source, lineno) + "invalid element count '" + tok[2] + "'");
      }
      elements.push_back({tok[1], static_cast<std::size_t>(*count), {}, false});
    } else if (tok[0] == "property") {
      if (elements.empty()) {
        throw FormatError(detail::where(source, lineno) + "property before any element");
      }
      if (tok.size() >= 2 && tok[1] == "list") {
        elements.back().has_list = true;
        continue;
      }
      if (tok.size() != 3) {
        throw FormatError(detail::where(source, lineno) + "malformed property line");
      }
      static const std::vector<std::string> kFloat = {"float", "double", "float32", "float64"};
      static const std::vector<std::string> kInt = {"uchar", "char", "uint8", "int8", "ushort",
                                                    "short", "uint16", "int16", "uint", "int",
                                                    "uint32", "int32"};
      Property p{tok[2], false};
      if (std::find(kInt.begin(), kInt.end(), tok[1]) != kInt.end()) {
        p.integer = true;
      } else if (std::find(kFloat.begin(), kFloat.end(), tok[1]) == kFloat.end()) {
        throw FormatError(detail::where(source, lineno) + "unknown property type '" + tok[1] + "'");
      }
      elements.back().properties.push_back(p);
    } else {
      throw FormatError(detail::where(source, lineno) + "unexpected header keyword '" + tok[0] + "'");
    }
  }
  if (!ascii) {
    throw FormatError(detail::where(source, lineno) + "missing format line");
  }

  std::optional<ColoredPointCloud> result;
  for (const Element& el : elements) {
    if (el.name != "vertex") {
      for (std::size_t i = 0; i < el.count; ++i) {
        if (!next_line()) {
          throw FormatError(detail::where(source, lineno) + "truncated '" + el.name + "' element data");
        }
      }
      continue;
    }
    if (el.has_list) {
      throw FormatError(source + ": list properties on vertices are not supported");
    }
    auto index_of = [&](const std::string& name) -> int {
      for (std::size_t i = 0; i < el.properties.size(); ++i) {
        if (el.properties[i].name == name) {
          return static_cast<int>(i);
        }
      }
      return -1;
    };
    const int ix = index_of("x"), iy = index_of("y"), iz = index_of("z");
    if (ix < 0 || iy < 0 || iz < 0) {
      throw FormatError(source + ": vertex element lacks x/y/z properties");
    }
    std::vector<int> color_idx;
    for (const char* name : {"red", "green", "blue"}) {
      const int k = index_of(name);
      if (k >= 0) {
        color_idx.push_back(k);
      }
    }
    if (color_idx.empty()) {
      for (int c = 0;; ++c) {
        const int k = index_of("f" + std::to_string(c));
        if (k < 0) {
          break;
        }
        color_idx.push_back(k);
      }
    } else if (color_idx.size() != 3) {
      throw FormatError(source + ": vertex colors need all of red, green, blue");
    }
    if (el.count == 0) {
      throw FormatError(source + ": vertex element is empty");
    }
    const auto n = static_cast<Eigen::Index>(el.count);
    const Eigen::Index channels = color_idx.empty() ? 3 : static_cast<Eigen::Index>(color_idx.size());
    Positions pos(n, 3);
    Features feat(n, channels);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!next_line()) {
        throw FormatError(detail::where(source, lineno) + "expected " + std::to_string(el.count) +
                          " vertices, file ended after " + std::to_string(i));
      }
      const auto tok = detail::split_ws(line);
      if (tok.size() != el.properties.size()) {
        throw FormatError(detail::where(source, lineno) + "expected " + std::to_string(el.properties.size()) +
                          " values, found " + std::to_string(tok.size()));
      }
      std::vector<double> vals(tok.size());
      for (std::size_t k = 0; k < tok.size(); ++k) {
        const auto v = detail::parse_number(tok[k]);
        if (!v || !std::isfinite(*v)) {
          throw FormatError(detail::where(source, lineno) + "invalid number '" + tok[k] + "'");
        }
        vals[k] = *v;
      }
      pos(i, 0) = vals[static_cast<std::size_t>(ix)];
      pos(i, 1) = vals[static_cast<std::size_t>(iy)];
      pos(i, 2) = vals[static_cast<std::size_t>(iz)];
      for (Eigen::Index c = 0; c < channels; ++c) {
        if (color_idx.empty()) {
          feat(i, c) = 0.5;
          continue;
        }
        const auto k = static_cast<std::size_t>(color_idx[static_cast<std::size_t>(c)]);
        feat(i, c) = el.properties[k].integer ? vals[k] / 255.0 : vals[k];
      }
    }
    result = ColoredPointCloud(std::move(pos), std::move(feat));
  }
  if (!result) {
    throw FormatError(source + ": no vertex element");
  }
  return *result;
}

inline ColoredPointCloud read_ply(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  return read_ply(in, path.string());
}

// ---------------------------------------------------------------- PPM (P6)

inline std::uint8_t quantize_unit(double v) {
  const double c = std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

inline void write_ppm(std::ostream& os, const Image& img) {
  if (img.channels != 3) {
    throw std::invalid_argument("PPM output needs a 3-channel image");
  }
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<char> bytes(img.pixels.size());
  std::transform(img.pixels.begin(), img.pixels.end(), bytes.begin(),
                 [](double v) { return static_cast<char>(quantize_unit(v)); });
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
  auto out = detail::open_out(path);
  write_ppm(out, img);
}

namespace detail {

// Reads one whitespace-delimited header token, skipping '#' comments.
inline std::string header_token(std::istream& in, const std::string& source) {
  std::string tok;
  char ch = 0;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) {
        return tok;
      }
      continue;
    }
    tok.push_back(ch);
  }
  if (tok.empty()) {
    throw FormatError(source + ": truncated header");
  }
  return tok;
}

inline int header_int(std::istream& in, const std::string& source) {
  const std::string tok = header_token(in, source);
  int v = 0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc{} || ptr != tok.data() + tok.size() || v < 1) {
    throw FormatError(source + ": invalid header integer '" + tok + "'");
  }
  return v;
}

}  // namespace detail

inline Image read_ppm(std::istream& in, const std::string& source = "<ppm>") {
  if (detail::header_token(in, source) != "P6") {
    throw FormatError(source + ": not a binary PPM (P6)");
  }
  const int w = detail::header_int(in, source);
  const int h = detail::header_int(in, source);
  const int maxval = detail::header_int(in, source);
  if (maxval != 255) {
    throw FormatError(source + ": only 8-bit PPM (maxval 255) is supported");
  }
  Image img(w, h, 3);
  std::vector<unsigned char> bytes(img.pixels.size());
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) {
    throw FormatError(source + ": truncated pixel data");
  }
  std::transform(bytes.begin(), bytes.end(), img.pixels.begin(), [](unsigned char b) { return b / 255.0; });
  return img;
}

inline Image read_ppm(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  return read_ppm(in, path.string());
}

// ---------------------------------------------------------------- PFM

/// Grayscale little-endian PFM ("Pf", scale -1); rows stored bottom to top.
inline void write_pfm(std::ostream& os, const DepthMap& depth) {
  os << "Pf\n" << depth.width << ' ' << depth.height << "\n-1.0\n";
  std::vector<float> row(static_cast<std::size_t>(depth.width));
  for (int y = depth.height - 1; y >= 0; --y) {
    for (int x = 0; x < depth.width; ++x) {
      row[static_cast<std::size_t>(x)] = static_cast<float>(depth.at(x, y));
    }
    if constexpr (std::endian::native == std::endian::big) {
      for (float& f : row) {
        auto bits = std::bit_cast<std::uint32_t>(f);
        bits = __builtin_bswap32(bits);
        f = std::bit_cast<float>(bits);
      }
    }
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
}

inline void write_pfm(const std::filesystem::path& path, const DepthMap& depth) {
  auto out = detail::open_out(path);
  write_pfm(out, depth);
}

inline DepthMap read_pfm(std::istream& in, const std::string& source = "<pfm>") {
  if (detail::header_token(in, source) != "Pf") {
    throw FormatError(source + ": only grayscale PFM ('Pf') is supported");
  }
  const int w = detail::header_int(in, source);
  const int h = detail::header_int(in, source);
  const auto scale = detail::parse_number(detail::header_token(in, source));
  if (!scale || *scale == 0.0) {
    throw FormatError(source + ": invalid PFM scale");
  }
  const bool little = *scale < 0.0;
  const bool swap = little != (std::endian::native == std::endian::little);
  DepthMap depth(w, h);
  std::vector<float> row(static_cast<std::size_t>(w));
  for (int y = h - 1; y >= 0; --y) {
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != row.size() * sizeof(float)) {
      throw FormatError(source + ": truncated pixel data");
    }
    for (int x = 0; x < w; ++x) {
      float f = row[static_cast<std::size_t>(x)];
      if (swap) {
        f = std::bit_cast<float>(__builtin_bswap32(std::bit_cast<std::uint32_t>(f)));
      }
      depth.at(x, y) = f;
    }
  }
  return depth;
}

inline DepthMap read_pfm(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  return read_pfm(in, path.string());
}

}  // namespace fcmpc
