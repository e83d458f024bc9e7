#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "i3net/data/scene.hpp"

namespace i3net::data {

// Parse failure in an on-disk dataset; carries the offending file and the byte
// offset at which parsing stopped.
class DatasetError : public std::runtime_error {
 public:
  DatasetError(std::filesystem::path file, std::uint64_t offset, const std::string& what);
  const std::filesystem::path& file() const { return file_; }
  std::uint64_t offset() const { return offset_; }

 private:
  std::filesystem::path file_;
  std::uint64_t offset_;
};

struct Dataset {
  std::vector<std::string> names;
  std::vector<Scene> scenes;

  std::size_t size() const { return scenes.size(); }
};

// N x 3 x H x W batch of the listed scenes, in order.
ad::Tensor stack_images(const Dataset& dataset, std::span<const std::size_t> indices);

// Layout of a dataset directory:
//   manifest.txt     one image basename per line
//   <name>.ppm       binary P6, 8-bit RGB
//   <name>.txt       one "class_id cx cy w h" line per object
void write_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset write_dataset(const std::filesystem::path& dir, const SceneSpec& spec, std::size_t count);
Dataset read_dataset(const std::filesystem::path& dir);

Dataset generate_dataset(const SceneSpec& spec, std::size_t count);

void write_ppm(const std::filesystem::path& file, const ad::Tensor& image);
ad::Tensor read_ppm(const std::filesystem::path& file);

std::string format_annotation(const Annotation& a);
Annotation parse_annotation(const std::string& line);

void write_annotations(const std::filesystem::path& file, const std::vector<Annotation>& annotations);
std::vector<Annotation> read_annotations(const std::filesystem::path& file);

}  // namespace i3net::data
