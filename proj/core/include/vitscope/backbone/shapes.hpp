#pragma once

#include "vitscope/backbone/image.hpp"
#include "vitscope/io.hpp"
#include "vitscope/rng.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace vitscope::backbone {

enum class ShapeKind { kCircle, kSquare, kCurveArc, kLine };
enum class WatermarkMotif { kCross, kChecker, kRing };
enum class Split { kTrain, kEval, kSpuriousOnly, kClassOnly };

std::string to_string(ShapeKind k);
std::string to_string(WatermarkMotif m);
std::string to_string(Split s);
ShapeKind shape_kind_from_string(const std::string& s);
WatermarkMotif motif_from_string(const std::string& s);
Split split_from_string(const std::string& s);

using Rgb = std::array<std::uint8_t, 3>;

/// One class of the vocabulary: class id == index in ShapesConfig::shape_vocabulary.
struct ShapeSpec {
  ShapeKind kind = ShapeKind::kCircle;
  Rgb color{255, 255, 255};
  int min_size = 10;  // pixels; diameter, side, arc radius or segment length
  int max_size = 16;
  // Orientation for arcs and lines (degrees). Unset draws a random angle.
  std::optional<double> angle_deg;
};

struct SpuriousPlant {
  int class_id = 0;
  WatermarkMotif motif = WatermarkMotif::kCross;
  double rate = 1.0;  // fraction of planted-class training images that carry the watermark
};

struct ShapesConfig {
  int image_size = 64;
  int patch_size = 8;
  std::vector<ShapeSpec> shape_vocabulary;
  std::optional<SpuriousPlant> spurious_plant;
  std::uint64_t seed = 0;

  int train_count = 3000;
  int eval_count = 600;
  int probe_count = 200;  // per spurious-only / class-only split

  int max_distractors = 2;       // gray arcs and lines at random angles
  int stroke_width = 2;          // arcs, lines and distractors
  double arc_half_span_deg = 60.0;
  int noise_amplitude = 12;      // uniform background noise, +/- in 8-bit units

  int num_classes() const { return static_cast<int>(shape_vocabulary.size()); }
  int patches_per_side() const { return image_size / patch_size; }

  /// Throws ConfigError on invalid geometry or rates.
  void validate() const;
};

/// Desk-scale default: six classes including two same-colour arcs that
/// differ only by orientation, with the watermark planted on one of them.
ShapesConfig default_shapes_config();

Json to_json(const ShapesConfig& c);
ShapesConfig shapes_config_from_json(const Json& j);

struct Sample {
  Image image;
  int label = -1;  // -1 for images without a class shape (spurious-only)
  bool watermark = false;
};

struct Dataset {
  Split split = Split::kTrain;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
};

/// Pure function of (config, split): identical inputs give byte-identical images.
Dataset generate_shapes_dataset(const ShapesConfig& config, Split split);
int split_count(const ShapesConfig& config, Split split);

/// One sample of a split by index; generate_shapes_dataset is this in a loop.
Sample generate_sample(const ShapesConfig& config, Split split, int index);

/// Pixel box (inclusive-exclusive) reserved for the watermark.
struct Box {
  int x0, y0, x1, y1;
};
Box watermark_box(const ShapesConfig& config);

// Rasterization primitives, shared with the tuning-curve renderer.
void fill_background(Image& img, Rng& rng, int noise_amplitude);
void draw_arc(Image& img, double cx, double cy, double radius, double angle_deg, double half_span_deg,
              double width, const Rgb& color);
void draw_line(Image& img, double cx, double cy, double length, double angle_deg, double width,
               const Rgb& color);
void draw_circle(Image& img, double cx, double cy, double radius, const Rgb& color);
void draw_square(Image& img, double cx, double cy, double side, const Rgb& color);
void draw_watermark(Image& img, const Box& box, WatermarkMotif motif);

/// Dataset manifest record, one per image.
Json manifest_record(const Sample& s, Split split, int index);

}  // namespace vitscope::backbone
