#include "vitscope/backbone/shapes.hpp"

#include <algorithm>
#include <cmath>

namespace vitscope::backbone {
namespace {

constexpr Rgb kDistractorColor{140, 140, 140};
constexpr Rgb kWatermarkColor{240, 240, 240};
constexpr double kDegToRad = M_PI / 180.0;

void blend(Image& img, int x, int y, double alpha, const Rgb& color) {
  if (alpha <= 0.0 || x < 0 || y < 0 || x >= img.size || y >= img.size) return;
  alpha = std::min(alpha, 1.0);
  auto* p = img.pixel(x, y);
  for (int c = 0; c < 3; ++c) {
    const double v = p[c] * (1.0 - alpha) + color[c] * alpha;
    p[c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
  }
}

double coverage(double signed_inside) { return std::clamp(signed_inside + 0.5, 0.0, 1.0); }

double angle_diff_deg(double a, double b) {
  double d = std::fmod(a - b, 360.0);
  if (d > 180.0) d -= 360.0;
  if (d < -180.0) d += 360.0;
  return d;
}

double point_segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

template <class Fn>
void raster(Image& img, double cx, double cy, double extent, Fn&& alpha_at) {
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - extent - 1)));
  const int x1 = std::min(img.size - 1, static_cast<int>(std::ceil(cx + extent + 1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - extent - 1)));
  const int y1 = std::min(img.size - 1, static_cast<int>(std::ceil(cy + extent + 1)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) alpha_at(x, y, x + 0.5, y + 0.5);
  }
}

// Half-extent of a shape around its placement centre.
double shape_extent(ShapeKind kind, double size, double stroke) {
  switch (kind) {
    case ShapeKind::kCircle:
      return size / 2.0 + 1.0;
    case ShapeKind::kSquare:
      return size / 2.0 * std::sqrt(2.0) + 1.0;
    case ShapeKind::kCurveArc:
      return size / 2.0 + stroke;
    case ShapeKind::kLine:
      return size / 2.0 + stroke;
  }
  return size;
}

bool overlaps(const Box& b, double cx, double cy, double extent) {
  return cx + extent > b.x0 && cx - extent < b.x1 && cy + extent > b.y0 && cy - extent < b.y1;
}

// Rejection-samples a centre keeping the shape inside the image and off the watermark box.
std::pair<double, double> place(Rng& rng, int image_size, double extent, const std::optional<Box>& avoid) {
  const double lo = extent, hi = image_size - extent;
  for (int attempt = 0; attempt < 256; ++attempt) {
    const double cx = rng.uniform(lo, hi), cy = rng.uniform(lo, hi);
    if (!avoid || !overlaps(*avoid, cx, cy, extent)) return {cx, cy};
  }
  throw ConfigError("cannot place a shape of half-extent " + std::to_string(extent) +
                    " without overlapping the watermark box");
}

void draw_shape(Image& img, Rng& rng, const ShapeSpec& spec, const ShapesConfig& cfg,
                const std::optional<Box>& avoid) {
  const double size = rng.uniform_int(spec.min_size, spec.max_size);
  const double angle = spec.angle_deg ? *spec.angle_deg : rng.uniform(0.0, 360.0);
  const double extent = shape_extent(spec.kind, size, cfg.stroke_width);
  const auto [cx, cy] = place(rng, cfg.image_size, extent, avoid);
  switch (spec.kind) {
    case ShapeKind::kCircle:
      draw_circle(img, cx, cy, size / 2.0, spec.color);
      break;
    case ShapeKind::kSquare:
      draw_square(img, cx, cy, size, spec.color);
      break;
    case ShapeKind::kCurveArc:
      draw_arc(img, cx, cy, size / 2.0, angle, cfg.arc_half_span_deg, cfg.stroke_width, spec.color);
      break;
    case ShapeKind::kLine:
      draw_line(img, cx, cy, size, angle, cfg.stroke_width, spec.color);
      break;
  }
}

void draw_distractors(Image& img, Rng& rng, const ShapesConfig& cfg, const std::optional<Box>& avoid) {
  const int n = rng.uniform_int(0, cfg.max_distractors);
  for (int i = 0; i < n; ++i) {
    ShapeSpec spec;
    spec.kind = rng.uniform() < 0.5 ? ShapeKind::kCurveArc : ShapeKind::kLine;
    spec.color = kDistractorColor;
    spec.min_size = 8;
    spec.max_size = 14;
    draw_shape(img, rng, spec, cfg, avoid);
  }
}

// Planted-class image j carries the watermark iff floor((j+1)r) > floor(jr):
// the first n planted images contain exactly floor(n r) watermarks.
bool planted_watermark(int j, double rate) {
  return std::floor((j + 1) * rate + 1e-9) > std::floor(j * rate + 1e-9);
}

}  // namespace

std::string to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::kCircle: return "circle";
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kCurveArc: return "curve-arc";
    case ShapeKind::kLine: return "line";
  }
  return "?";
}

std::string to_string(WatermarkMotif m) {
  switch (m) {
    case WatermarkMotif::kCross: return "cross";
    case WatermarkMotif::kChecker: return "checker";
    case WatermarkMotif::kRing: return "ring";
  }
  return "?";
}

std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kEval: return "eval";
    case Split::kSpuriousOnly: return "spurious-only";
    case Split::kClassOnly: return "class-only";
  }
  return "?";
}

ShapeKind shape_kind_from_string(const std::string& s) {
  for (auto k : {ShapeKind::kCircle, ShapeKind::kSquare, ShapeKind::kCurveArc, ShapeKind::kLine}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown shape kind '" + s + "'");
}

WatermarkMotif motif_from_string(const std::string& s) {
  for (auto m : {WatermarkMotif::kCross, WatermarkMotif::kChecker, WatermarkMotif::kRing}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown watermark motif '" + s + "'");
}

Split split_from_string(const std::string& s) {
  for (auto x : {Split::kTrain, Split::kEval, Split::kSpuriousOnly, Split::kClassOnly}) {
    if (to_string(x) == s) return x;
  }
  throw ConfigError("unknown split '" + s + "'");
}

void ShapesConfig::validate() const {
  if (patch_size <= 0 || image_size <= 0 || image_size % patch_size != 0) {
    throw ConfigError("image_size must be a positive multiple of patch_size");
  }
  if (shape_vocabulary.empty()) throw ConfigError("shape_vocabulary is empty");
  for (const auto& s : shape_vocabulary) {
    if (s.min_size <= 0 || s.max_size < s.min_size) throw ConfigError("invalid shape size range");
    if (2.0 * shape_extent(s.kind, s.max_size, stroke_width) >= image_size) {
      throw ConfigError("shape of size " + std::to_string(s.max_size) + " does not fit a " +
                        std::to_string(image_size) + "px image");
    }
  }
  if (spurious_plant) {
    if (spurious_plant->rate < 0.0 || spurious_plant->rate > 1.0) {
      throw ConfigError("spurious co-occurrence rate must lie in [0, 1]");
    }
    if (spurious_plant->class_id < 0 || spurious_plant->class_id >= num_classes()) {
      throw ConfigError("spurious plant class id out of range");
    }
  }
  if (train_count < 0 || eval_count < 0 || probe_count < 0) throw ConfigError("negative split size");
}

ShapesConfig default_shapes_config() {
  ShapesConfig c;
  c.seed = 7;
  c.shape_vocabulary = {
      {ShapeKind::kCircle, {220, 50, 50}, 12, 20, std::nullopt},
      {ShapeKind::kSquare, {60, 90, 230}, 10, 16, std::nullopt},
      {ShapeKind::kCurveArc, {60, 200, 80}, 14, 24, 45.0},
      {ShapeKind::kLine, {230, 210, 40}, 14, 24, 0.0},
      {ShapeKind::kCurveArc, {200, 80, 200}, 14, 24, 225.0},
      {ShapeKind::kLine, {60, 210, 220}, 14, 24, 90.0},
  };
  c.spurious_plant = SpuriousPlant{4, WatermarkMotif::kCross, 0.95};
  return c;
}

Json to_json(const ShapesConfig& c) {
  Json vocab = Json::array();
  for (const auto& s : c.shape_vocabulary) {
    Json e = {{"kind", to_string(s.kind)},
              {"color", {s.color[0], s.color[1], s.color[2]}},
              {"min_size", s.min_size},
              {"max_size", s.max_size}};
    e["angle_deg"] = s.angle_deg ? Json(*s.angle_deg) : Json(nullptr);
    vocab.push_back(e);
  }
  Json j = {{"image_size", c.image_size},     {"patch_size", c.patch_size},
            {"shape_vocabulary", vocab},       {"seed", c.seed},
            {"train_count", c.train_count},   {"eval_count", c.eval_count},
            {"probe_count", c.probe_count},   {"max_distractors", c.max_distractors},
            {"stroke_width", c.stroke_width}, {"arc_half_span_deg", c.arc_half_span_deg},
            {"noise_amplitude", c.noise_amplitude}};
  if (c.spurious_plant) {
    j["spurious_plant"] = {{"class_id", c.spurious_plant->class_id},
                           {"motif", to_string(c.spurious_plant->motif)},
                           {"rate", c.spurious_plant->rate}};
  } else {
    j["spurious_plant"] = nullptr;
  }
  return j;
}

ShapesConfig shapes_config_from_json(const Json& j) {
  ShapesConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.seed = j.value("seed", c.seed);
  c.train_count = j.value("train_count", c.train_count);
  c.eval_count = j.value("eval_count", c.eval_count);
  c.probe_count = j.value("probe_count", c.probe_count);
  c.max_distractors = j.value("max_distractors", c.max_distractors);
  c.stroke_width = j.value("stroke_width", c.stroke_width);
  c.arc_half_span_deg = j.value("arc_half_span_deg", c.arc_half_span_deg);
  c.noise_amplitude = j.value("noise_amplitude", c.noise_amplitude);
  if (j.contains("shape_vocabulary")) {
    for (const auto& e : j.at("shape_vocabulary")) {
      ShapeSpec s;
      s.kind = shape_kind_from_string(e.at("kind").get<std::string>());
      const auto col = e.at("color");
      s.color = {col[0].get<std::uint8_t>(), col[1].get<std::uint8_t>(), col[2].get<std::uint8_t>()};
      s.min_size = e.value("min_size", s.min_size);
      s.max_size = e.value("max_size", s.max_size);
      if (e.contains("angle_deg") && !e["angle_deg"].is_null()) s.angle_deg = e["angle_deg"].get<double>();
      c.shape_vocabulary.push_back(s);
    }
  } else {
    c.shape_vocabulary = default_shapes_config().shape_vocabulary;
  }
  if (j.contains("spurious_plant") && !j["spurious_plant"].is_null()) {
    const auto& p = j["spurious_plant"];
    c.spurious_plant = SpuriousPlant{p.at("class_id").get<int>(),
                                     motif_from_string(p.value("motif", std::string("cross"))),
                                     p.at("rate").get<double>()};
  }
  c.validate();
  return c;
}

Box watermark_box(const ShapesConfig& config) {
  const int s = config.image_size, p = config.patch_size;
  return {s - p, s - p, s, s};
}

int split_count(const ShapesConfig& config, Split split) {
  switch (split) {
    case Split::kTrain: return config.train_count;
    case Split::kEval: return config.eval_count;
    case Split::kSpuriousOnly:
    case Split::kClassOnly: return config.probe_count;
  }
  return 0;
}

Sample generate_sample(const ShapesConfig& config, Split split, int index) {
  Rng rng(derive_seed({config.seed, static_cast<std::uint64_t>(split), static_cast<std::uint64_t>(index)}));
  const int n_classes = config.num_classes();
  std::optional<Box> avoid;
  if (config.spurious_plant) avoid = watermark_box(config);

  Sample s;
  s.image = Image(config.image_size);
  fill_background(s.image, rng, config.noise_amplitude);
  draw_distractors(s.image, rng, config, avoid);

  switch (split) {
    case Split::kTrain:
    case Split::kEval: {
      s.label = index % n_classes;
      if (config.spurious_plant && s.label == config.spurious_plant->class_id) {
        s.watermark = planted_watermark(index / n_classes, config.spurious_plant->rate);
      }
      break;
    }
    case Split::kSpuriousOnly:
      s.label = -1;
      s.watermark = true;
      break;
    case Split::kClassOnly:
      s.label = config.spurious_plant->class_id;
      s.watermark = false;
      break;
  }
  if (s.label >= 0) draw_shape(s.image, rng, config.shape_vocabulary[s.label], config, avoid);
  if (s.watermark) draw_watermark(s.image, *avoid, config.spurious_plant->motif);
  return s;
}

Dataset generate_shapes_dataset(const ShapesConfig& config, Split split) {
  config.validate();
  if ((split == Split::kSpuriousOnly || split == Split::kClassOnly) && !config.spurious_plant) {
    throw ConfigError("split '" + to_string(split) + "' requires a spurious plant");
  }
  Dataset ds;
  ds.split = split;
  const int n = split_count(config, split);
  ds.samples.reserve(n);
  for (int i = 0; i < n; ++i) ds.samples.push_back(generate_sample(config, split, i));
  return ds;
}

void fill_background(Image& img, Rng& rng, int noise_amplitude) {
  for (auto& v : img.rgb) {
    const int noise = noise_amplitude > 0 ? rng.uniform_int(-noise_amplitude, noise_amplitude) : 0;
    v = static_cast<std::uint8_t>(std::clamp(24 + noise, 0, 255));
  }
}

void draw_arc(Image& img, double cx, double cy, double radius, double angle_deg, double half_span_deg,
              double width, const Rgb& color) {
  // (cx, cy) is the arc midpoint; the arc bulges toward angle_deg.
  const double dx = std::cos(angle_deg * kDegToRad), dy = -std::sin(angle_deg * kDegToRad);
  const double ox = cx - radius * dx, oy = cy - radius * dy;
  const double a0 = angle_deg - half_span_deg, a1 = angle_deg + half_span_deg;
  const double e0x = ox + radius * std::cos(a0 * kDegToRad), e0y = oy - radius * std::sin(a0 * kDegToRad);
  const double e1x = ox + radius * std::cos(a1 * kDegToRad), e1y = oy - radius * std::sin(a1 * kDegToRad);
  raster(img, cx, cy, radius + width, [&](int x, int y, double px, double py) {
    const double vx = px - ox, vy = py - oy;
    const double phi = std::atan2(-vy, vx) / kDegToRad;
    double dist;
    if (std::abs(angle_diff_deg(phi, angle_deg)) <= half_span_deg) {
      dist = std::abs(std::sqrt(vx * vx + vy * vy) - radius);
    } else {
      dist = std::min(std::hypot(px - e0x, py - e0y), std::hypot(px - e1x, py - e1y));
    }
    blend(img, x, y, coverage(width / 2.0 - dist), color);
  });
}

void draw_line(Image& img, double cx, double cy, double length, double angle_deg, double width,
               const Rgb& color) {
  const double dx = std::cos(angle_deg * kDegToRad) * length / 2.0;
  const double dy = -std::sin(angle_deg * kDegToRad) * length / 2.0;
  raster(img, cx, cy, length / 2.0 + width, [&](int x, int y, double px, double py) {
    const double dist = point_segment_distance(px, py, cx - dx, cy - dy, cx + dx, cy + dy);
    blend(img, x, y, coverage(width / 2.0 - dist), color);
  });
}

void draw_circle(Image& img, double cx, double cy, double radius, const Rgb& color) {
  raster(img, cx, cy, radius, [&](int x, int y, double px, double py) {
    blend(img, x, y, coverage(radius - std::hypot(px - cx, py - cy)), color);
  });
}

void draw_square(Image& img, double cx, double cy, double side, const Rgb& color) {
  raster(img, cx, cy, side / 2.0, [&](int x, int y, double px, double py) {
    const double inside = std::min(side / 2.0 - std::abs(px - cx), side / 2.0 - std::abs(py - cy));
    blend(img, x, y, coverage(inside), color);
  });
}

void draw_watermark(Image& img, const Box& box, WatermarkMotif motif) {
  const double cx = (box.x0 + box.x1) / 2.0, cy = (box.y0 + box.y1) / 2.0;
  const double half = (box.x1 - box.x0) / 2.0 - 1.0;
  switch (motif) {
    case WatermarkMotif::kCross:
      draw_line(img, cx, cy, 2.0 * half * std::sqrt(2.0) - 1.0, 45.0, 1.2, kWatermarkColor);
      draw_line(img, cx, cy, 2.0 * half * std::sqrt(2.0) - 1.0, 135.0, 1.2, kWatermarkColor);
      break;
    case WatermarkMotif::kChecker:
      for (int y = box.y0 + 1; y < box.y1 - 1; ++y) {
        for (int x = box.x0 + 1; x < box.x1 - 1; ++x) {
          if (((x - box.x0) / 2 + (y - box.y0) / 2) % 2 == 0) blend(img, x, y, 1.0, kWatermarkColor);
        }
      }
      break;
    case WatermarkMotif::kRing:
      raster(img, cx, cy, half, [&](int x, int y, double px, double py) {
        blend(img, x, y, coverage(0.6 - std::abs(std::hypot(px - cx, py - cy) - (half - 0.5))),
              kWatermarkColor);
      });
      break;
  }
}

Json manifest_record(const Sample& s, Split split, int index) {
  return {{"index", index}, {"split", to_string(split)}, {"label", s.label}, {"spurious", s.watermark}};
}

}  // namespace vitscope::backbone
