#pragma once

// Procedural stand-in data: one coloured blob per positive image on a
// textured background. Blob hue encodes the category; its tight bounding box
// is the gold box.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "colongpt/image.hpp"
#include "colongpt/taxonomy.hpp"

namespace colongpt::fixtures {

struct FixtureSpec {
  std::uint64_t seed = 1;
  std::size_t n_images = 500;  // positives
  std::size_t n_categories = 6;
  double boxed_fraction = 0.6;
  std::size_t n_negatives = 0;
  int width = 56;
  int height = 56;
  std::string dataset = "synthetic";

  /// Throws UsageError on inadmissible arguments.
  void validate() const;
};

struct FixtureSet {
  taxonomy::Taxonomy taxonomy;
  taxonomy::DatasetManifest manifest;
  std::vector<image::Image> images;  // aligned with manifest.records
};

/// Positive category names, distinct after normalisation.
std::vector<std::string> category_names(std::size_t n);
taxonomy::Taxonomy make_taxonomy(std::size_t n_categories);

FixtureSet generate(const FixtureSpec& spec);

/// Writes taxonomy.json, manifest.jsonl and images/<image_id>.ppm.
void write(const FixtureSet& set, const std::filesystem::path& dir);

}  // namespace colongpt::fixtures
