#include "i3net/data/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

namespace i3net::data {

namespace fs = std::filesystem;

DatasetError::DatasetError(fs::path file, std::uint64_t offset, const std::string& what)
    : std::runtime_error(file.string() + " at byte " + std::to_string(offset) + ": " + what),
      file_(std::move(file)),
      offset_(offset) {}

namespace {

std::string read_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DatasetError(file, 0, "cannot open file");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string shortest(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

}  // namespace

void write_ppm(const fs::path& file, const ad::Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ad::ShapeError("write_ppm: expected 3 x H x W image, got " + ad::shape_str(image.shape()));
  }
  const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  const auto data = image.data();
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::round(std::clamp(data[c * plane + i], 0.0, 1.0) * 255.0);
      out.push_back(static_cast<char>(static_cast<unsigned char>(v)));
    }
  }
  std::ofstream f(file, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + file.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

ad::Tensor read_ppm(const fs::path& file) {
  const std::string bytes = read_file(file);
  std::size_t pos = 0;
  auto next_token = [&](const char* what) {
    while (pos < bytes.size()) {
      if (is_space(bytes[pos])) {
        ++pos;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !is_space(bytes[pos])) ++pos;
    if (start == pos) throw DatasetError(file, start, std::string("missing ") + what);
    return std::pair{start, bytes.substr(start, pos - start)};
  };
  auto number = [&](const char* what) {
    auto [start, tok] = next_token(what);
    std::size_t value = 0;
    auto [end, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), value);
    if (ec != std::errc() || end != tok.data() + tok.size() || value == 0) {
      throw DatasetError(file, start, std::string("invalid ") + what + " '" + tok + "'");
    }
    return value;
  };

  auto [magic_at, magic] = next_token("magic number");
  if (magic != "P6") throw DatasetError(file, magic_at, "expected P6 magic, found '" + magic + "'");
  const std::size_t w = number("width");
  const std::size_t h = number("height");
  const std::size_t maxval = number("maxval");
  if (maxval != 255) throw DatasetError(file, pos, "only 8-bit (maxval 255) images are supported");
  if (pos >= bytes.size() || !is_space(bytes[pos])) throw DatasetError(file, pos, "missing whitespace after header");
  ++pos;

  const std::size_t plane = w * h;
  const std::size_t payload = plane * 3;
  if (bytes.size() - pos < payload) {
    throw DatasetError(file, bytes.size(),
                       "truncated pixel payload: expected " + std::to_string(payload) + " bytes from offset " +
                           std::to_string(pos) + ", found " + std::to_string(bytes.size() - pos));
  }
  std::vector<double> data(payload);
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      data[c * plane + i] = static_cast<double>(static_cast<unsigned char>(bytes[pos + i * 3 + c])) / 255.0;
    }
  }
  return ad::Tensor::from({3, h, w}, std::move(data));
}

std::string format_annotation(const Annotation& a) {
  return std::to_string(a.class_id) + " " + shortest(a.cx) + " " + shortest(a.cy) + " " + shortest(a.w) + " " +
         shortest(a.h);
}

Annotation parse_annotation(const std::string& line) {
  std::vector<std::string> fields;
  std::istringstream is(line);
  for (std::string tok; is >> tok;) fields.push_back(tok);
  if (fields.size() != 5) {
    throw std::invalid_argument("expected 5 fields 'class_id cx cy w h', found " + std::to_string(fields.size()));
  }
  Annotation a;
  {
    const auto& t = fields[0];
    auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), a.class_id);
    if (ec != std::errc() || end != t.data() + t.size() || a.class_id < 0) {
      throw std::invalid_argument("invalid class id '" + t + "'");
    }
  }
  double* targets[4] = {&a.cx, &a.cy, &a.w, &a.h};
  for (int i = 0; i < 4; ++i) {
    const auto& t = fields[static_cast<std::size_t>(i) + 1];
    auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), *targets[i]);
    if (ec != std::errc() || end != t.data() + t.size() || !std::isfinite(*targets[i])) {
      throw std::invalid_argument("invalid number '" + t + "'");
    }
  }
  const double eps = 1e-12;
  if (a.w <= 0 || a.h <= 0) throw std::invalid_argument("box width and height must be positive");
  if (a.cx - a.w / 2 < -eps || a.cx + a.w / 2 > 1 + eps || a.cy - a.h / 2 < -eps || a.cy + a.h / 2 > 1 + eps) {
    throw std::invalid_argument("box extends outside the unit square");
  }
  return a;
}

void write_annotations(const fs::path& file, const std::vector<Annotation>& annotations) {
  std::ofstream f(file, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + file.string());
  for (const auto& a : annotations) f << format_annotation(a) << '\n';
}

std::vector<Annotation> read_annotations(const fs::path& file) {
  const std::string text = read_file(file);
  std::vector<Annotation> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") != std::string::npos) {
      try {
        out.push_back(parse_annotation(line));
      } catch (const std::invalid_argument& e) {
        throw DatasetError(file, pos, e.what());
      }
    }
    pos = end + 1;
  }
  return out;
}

Dataset generate_dataset(const SceneSpec& spec, std::size_t count) {
  Dataset ds;
  for (std::size_t i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%s_%06zu", to_string(spec.domain).c_str(), i);
    ds.names.emplace_back(name);
    ds.scenes.push_back(generate_scene(spec, i));
  }
  return ds;
}

void write_dataset(const fs::path& dir, const Dataset& dataset) {
  fs::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt", std::ios::binary);
  if (!manifest) throw std::runtime_error("cannot write " + (dir / "manifest.txt").string());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    write_ppm(dir / (dataset.names[i] + ".ppm"), dataset.scenes[i].image);
    write_annotations(dir / (dataset.names[i] + ".txt"), dataset.scenes[i].annotations);
    manifest << dataset.names[i] << '\n';
  }
}

Dataset write_dataset(const fs::path& dir, const SceneSpec& spec, std::size_t count) {
  Dataset ds = generate_dataset(spec, count);
  write_dataset(dir, ds);
  return ds;
}

Dataset read_dataset(const fs::path& dir) {
  const fs::path manifest = dir / "manifest.txt";
  if (!fs::exists(manifest)) throw DatasetError(manifest, 0, "dataset manifest not found");
  const std::string text = read_file(manifest);
  Dataset ds;
  std::istringstream is(text);
  for (std::string line; std::getline(is, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    Scene scene;
    scene.image = read_ppm(dir / (line + ".ppm"));
    scene.annotations = read_annotations(dir / (line + ".txt"));
    ds.names.push_back(line);
    ds.scenes.push_back(std::move(scene));
  }
  return ds;
}

ad::Tensor stack_images(const Dataset& dataset, std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("stack_images: empty index list");
  const ad::Shape& one = dataset.scenes.at(indices[0]).image.shape();
  std::vector<double> values;
  values.reserve(indices.size() * ad::numel(one));
  for (std::size_t i : indices) {
    const auto& img = dataset.scenes.at(i).image;
    if (img.shape() != one) throw ad::ShapeError("stack_images: scenes differ in image shape");
    values.insert(values.end(), img.data().begin(), img.data().end());
  }
  return ad::Tensor::from({indices.size(), one[0], one[1], one[2]}, std::move(values));
}

}  // namespace i3net::data
