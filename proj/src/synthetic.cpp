#include "animediff/synthetic.hpp"

#include <array>
#include <cmath>

namespace animediff::synth {

namespace {

using Color = std::array<float, 3>;

Color hsv(double h, double s, double v) {
  h = std::fmod(h, 1.0) * 6.0;
  const int i = static_cast<int>(h);
  const double f = h - i;
  const double p = v * (1 - s);
  const double q = v * (1 - s * f);
  const double t = v * (1 - s * (1 - f));
  double r = v, g = t, b = p;
  switch (i) {
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    case 5: r = v; g = p; b = q; break;
    default: break;
  }
  return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

struct Canvas {
  int size;
  std::vector<Color> px;

  explicit Canvas(int s) : size(s), px(static_cast<std::size_t>(s) * s) {}

  Color& at(int y, int x) { return px[static_cast<std::size_t>(y) * size + x]; }

  // Axis-aligned ellipse in normalized coordinates.
  void ellipse(double cx, double cy, double rx, double ry, const Color& c) {
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double u = ((x + 0.5) / size - cx) / rx;
        const double v = ((y + 0.5) / size - cy) / ry;
        if (u * u + v * v <= 1.0) at(y, x) = c;
      }
  }

  void rect(double x0, double y0, double x1, double y1, const Color& c) {
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double u = (x + 0.5) / size;
        const double v = (y + 0.5) / size;
        if (u >= x0 && u <= x1 && v >= y0 && v <= y1) at(y, x) = c;
      }
  }
};

}  // namespace

Tensor<float> character(int size, std::uint64_t seed) {
  if (size < 8) throw ParameterError("synthetic character: size must be >= 8");
  Rng rng(seed);
  const int big = 2 * size;
  Canvas c(big);

  const Color bg_top = hsv(rng.uniform(), rng.uniform(0.1, 0.4), rng.uniform(0.75, 1.0));
  const Color bg_bottom = hsv(rng.uniform(), rng.uniform(0.1, 0.4), rng.uniform(0.6, 0.95));
  for (int y = 0; y < big; ++y) {
    const float a = static_cast<float>(y) / (big - 1);
    for (int x = 0; x < big; ++x)
      for (int k = 0; k < 3; ++k) c.at(y, x)[k] = (1 - a) * bg_top[k] + a * bg_bottom[k];
  }

  const double hair_hue = rng.uniform();
  const Color hair = hsv(hair_hue, rng.uniform(0.4, 0.9), rng.uniform(0.35, 0.9));
  const Color hair_dark = {hair[0] * 0.7f, hair[1] * 0.7f, hair[2] * 0.7f};
  const Color skin = hsv(rng.uniform(0.03, 0.09), rng.uniform(0.15, 0.35), rng.uniform(0.85, 1.0));
  const Color cloth = hsv(rng.uniform(), rng.uniform(0.3, 0.9), rng.uniform(0.3, 0.9));
  const Color iris_left = hsv(rng.uniform(), rng.uniform(0.5, 1.0), rng.uniform(0.4, 0.9));
  // Occasionally heterochromatic.
  const Color iris_right = rng.uniform() < 0.2 ? hsv(rng.uniform(), rng.uniform(0.5, 1.0), rng.uniform(0.4, 0.9))
                                              : iris_left;
  const Color white = {0.97f, 0.97f, 0.97f};
  const Color dark = {0.12f, 0.08f, 0.08f};
  const Color mouth = {0.75f, 0.3f, 0.3f};

  const double cx = 0.5 + rng.uniform(-0.06, 0.06);
  const double cy = 0.5 + rng.uniform(-0.04, 0.04);
  const double face_rx = rng.uniform(0.2, 0.26);
  const double face_ry = rng.uniform(0.24, 0.3);

  c.rect(cx - 0.32, cy + 0.28, cx + 0.32, 1.0, cloth);
  c.ellipse(cx, cy + 0.29, 0.1, 0.05, skin);
  c.ellipse(cx, cy - 0.06, face_rx + 0.08, face_ry + 0.06, hair);
  c.ellipse(cx, cy + 0.03, face_rx, face_ry, skin);
  c.ellipse(cx, cy - face_ry * 0.75, face_rx * 0.95, face_ry * 0.35, hair);
  c.ellipse(cx - face_rx * 0.55, cy - face_ry * 0.45, face_rx * 0.3, face_ry * 0.35, hair_dark);

  const double eye_dx = face_rx * rng.uniform(0.38, 0.5);
  const double eye_y = cy + face_ry * rng.uniform(0.0, 0.15);
  const double eye_r = face_rx * rng.uniform(0.16, 0.22);
  for (int side = -1; side <= 1; side += 2) {
    const double ex = cx + side * eye_dx;
    c.ellipse(ex, eye_y, eye_r * 1.1, eye_r * 1.4, white);
    c.ellipse(ex, eye_y + eye_r * 0.1, eye_r * 0.8, eye_r * 1.15, side < 0 ? iris_left : iris_right);
    c.ellipse(ex, eye_y + eye_r * 0.15, eye_r * 0.35, eye_r * 0.5, dark);
  }
  c.ellipse(cx, cy + face_ry * 0.62, face_rx * 0.18, face_ry * 0.06, mouth);

  Tensor<float> out(1, 3, size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int k = 0; k < 3; ++k)
        out(0, k, y, x) = 0.25f * (c.at(2 * y, 2 * x)[k] + c.at(2 * y + 1, 2 * x)[k] + c.at(2 * y, 2 * x + 1)[k] +
                                   c.at(2 * y + 1, 2 * x + 1)[k]);
  return out;
}

std::vector<Tensor<float>> character_set(int count, int size, std::uint64_t first_seed) {
  std::vector<Tensor<float>> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) out.push_back(character(size, first_seed + static_cast<std::uint64_t>(i)));
  return out;
}

}  // namespace animediff::synth
