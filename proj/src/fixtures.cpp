#include "colongpt/fixtures.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "colongpt/error.hpp"
#include "colongpt/rng.hpp"

namespace colongpt::fixtures {
namespace {

constexpr std::array<const char*, 12> kBaseNames = {
    "polyp",         "adenoma",  "ulcer",       "bleeding",     "erosion",   "tumor",
    "diverticulum",  "lipoma",   "angioectasia", "inflammation", "stricture", "hemorrhoid",
};

std::array<std::uint8_t, 3> hsv_to_rgb(double h, double s, double v) {
  const double c = v * s;
  const double hp = std::fmod(h, 360.0) / 60.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) {
    r = c, g = x;
  } else if (hp < 2) {
    r = x, g = c;
  } else if (hp < 3) {
    g = c, b = x;
  } else if (hp < 4) {
    g = x, b = c;
  } else if (hp < 5) {
    r = x, b = c;
  } else {
    r = c, b = x;
  }
  const double m = v - c;
  auto q = [](double u) { return static_cast<std::uint8_t>(std::lround(std::clamp(u, 0.0, 1.0) * 255.0)); };
  return {q(r + m), q(g + m), q(b + m)};
}

void paint_background(image::Image& img, SplitMix64& rng) {
  const double base_r = 0.55 + 0.1 * rng.uniform();
  const double base_g = 0.35 + 0.05 * rng.uniform();
  const double base_b = 0.32 + 0.05 * rng.uniform();
  const double fx = 0.15 + 0.2 * rng.uniform();
  const double fy = 0.15 + 0.2 * rng.uniform();
  const double phase = 6.283185307179586 * rng.uniform();
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double wave = 0.06 * std::sin(fx * x + fy * y + phase);
      const double grain = 0.05 * (rng.uniform() - 0.5);
      std::uint8_t* p = img.pixel(x, y);
      p[0] = static_cast<std::uint8_t>(std::lround(std::clamp(base_r + wave + grain, 0.0, 1.0) * 255.0));
      p[1] = static_cast<std::uint8_t>(std::lround(std::clamp(base_g + wave + grain, 0.0, 1.0) * 255.0));
      p[2] = static_cast<std::uint8_t>(std::lround(std::clamp(base_b + wave + grain, 0.0, 1.0) * 255.0));
    }
  }
}

// Filled ellipse; returns its tight pixel bounding box.
taxonomy::BBox paint_blob(image::Image& img, std::array<std::uint8_t, 3> color, SplitMix64& rng) {
  const double w = img.width, h = img.height;
  const double rx = w * (0.12 + 0.16 * rng.uniform());
  const double ry = h * (0.12 + 0.16 * rng.uniform());
  const double cx = rx + 1 + (w - 2 * rx - 2) * rng.uniform();
  const double cy = ry + 1 + (h - 2 * ry - 2) * rng.uniform();
  int x1 = img.width, y1 = img.height, x2 = -1, y2 = -1;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
      if (dx * dx + dy * dy > 1.0) continue;
      std::uint8_t* p = img.pixel(x, y);
      p[0] = color[0], p[1] = color[1], p[2] = color[2];
      x1 = std::min(x1, x), y1 = std::min(y1, y), x2 = std::max(x2, x), y2 = std::max(y2, y);
    }
  }
  return {static_cast<double>(x1), static_cast<double>(y1), static_cast<double>(x2 + 1), static_cast<double>(y2 + 1)};
}

std::string image_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img_%05zu", i);
  return buf;
}

}  // namespace

void FixtureSpec::validate() const {
  if (n_categories < 2) throw UsageError("fixtures need at least 2 categories");
  if (n_images == 0) throw UsageError("fixtures need at least one positive image");
  if (!(boxed_fraction >= 0.0 && boxed_fraction <= 1.0)) throw UsageError("boxed fraction must lie in [0, 1]");
  if (width < 8 || height < 8) throw UsageError("fixture images must be at least 8x8");
  if (dataset.empty()) throw UsageError("fixture dataset name must be non-empty");
}

std::vector<std::string> category_names(std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::string name = kBaseNames[i % kBaseNames.size()];
    if (i >= kBaseNames.size()) name += " " + std::to_string(i / kBaseNames.size() + 1);
    out.push_back(name);
  }
  return out;
}

taxonomy::Taxonomy make_taxonomy(std::size_t n_categories) {
  using taxonomy::CategoryNode;
  using taxonomy::Level;
  std::vector<CategoryNode> nodes = {
      {"root.findings", "pathological findings", Level::kRoot, std::nullopt},
      {"parent.lesions", "lesions", Level::kParent, "root.findings"},
      {"root.negative", "negative", Level::kRoot, std::nullopt},
      {"parent.negative", "negative samples", Level::kParent, "root.negative"},
      {"child.negative", "normal mucosa", Level::kChild, "parent.negative"},
  };
  const auto names = category_names(n_categories);
  for (std::size_t i = 0; i < names.size(); ++i) {
    nodes.push_back({"child.c" + std::to_string(i), names[i], Level::kChild, "parent.lesions"});
  }
  return taxonomy::Taxonomy(std::move(nodes));
}

FixtureSet generate(const FixtureSpec& spec) {
  spec.validate();
  FixtureSet set;
  set.taxonomy = make_taxonomy(spec.n_categories);
  set.manifest.dataset = spec.dataset;
  set.manifest.split_policy = taxonomy::SplitPolicy::kProportional;

  std::vector<std::size_t> perm(spec.n_images);
  std::iota(perm.begin(), perm.end(), 0);
  SplitMix64 pick(keyed_hash(spec.seed, "boxed"));
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[pick.below(i)]);
  const auto n_boxed = static_cast<std::size_t>(std::llround(spec.boxed_fraction * static_cast<double>(spec.n_images)));
  std::vector<bool> boxed(spec.n_images, false);
  for (std::size_t i = 0; i < n_boxed; ++i) boxed[perm[i]] = true;

  const std::size_t total = spec.n_images + spec.n_negatives;
  for (std::size_t i = 0; i < total; ++i) {
    const bool positive = i < spec.n_images;
    SplitMix64 rng(keyed_hash(spec.seed, spec.dataset, image_id(i)));
    image::Image img(spec.width, spec.height);
    paint_background(img, rng);
    taxonomy::ImageRecord r;
    r.image_id = image_id(i);
    r.dataset = spec.dataset;
    r.rel_path = "images/" + r.image_id + ".ppm";
    r.width = spec.width;
    r.height = spec.height;
    if (positive) {
      const std::size_t c = i % spec.n_categories;
      r.child_category = "child.c" + std::to_string(c);
      r.polarity = taxonomy::Polarity::kPositive;
      const double hue = 360.0 * static_cast<double>(c) / static_cast<double>(spec.n_categories);
      const taxonomy::BBox box = paint_blob(img, hsv_to_rgb(hue, 0.9, 0.95), rng);
      if (boxed[i]) r.bbox = box;
    } else {
      r.child_category = "child.negative";
      r.polarity = taxonomy::Polarity::kNegative;
    }
    set.manifest.records.push_back(std::move(r));
    set.images.push_back(std::move(img));
  }
  return set;
}

void write(const FixtureSet& set, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  taxonomy::write_taxonomy(set.taxonomy, dir / "taxonomy.json");
  const taxonomy::DatasetManifest manifests[] = {set.manifest};
  taxonomy::write_manifest(manifests, dir / "manifest.jsonl");
  for (std::size_t i = 0; i < set.images.size(); ++i) {
    image::write_ppm(set.images[i], dir / set.manifest.records[i].rel_path);
  }
}

}  // namespace colongpt::fixtures
