#include "locfuse/flow.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "locfuse/error.hpp"

namespace locfuse {

void Image::validate() const {
  require(width > 0 && height > 0, "image: non-positive size");
  if (pixels.size() != std::size_t(width) * height) fail(ErrorCode::kShapeMismatch, "image: pixel count mismatch");
  for (double p : pixels) require(std::isfinite(p), "image: non-finite intensity");
}

void FlowField::validate() const {
  require(width > 0 && height > 0, "flow: non-positive size");
  const std::size_t n = std::size_t(width) * height;
  if (u.size() != n || v.size() != n) fail(ErrorCode::kShapeMismatch, "flow: channel size mismatch");
  if (!low_confidence.empty() && low_confidence.size() != n) {
    fail(ErrorCode::kShapeMismatch, "flow: confidence mask size mismatch");
  }
  for (std::size_t i = 0; i < n; ++i) require(std::isfinite(u[i]) && std::isfinite(v[i]), "flow: non-finite value");
}

namespace {

// 5-tap binomial blur followed by 2x decimation.
Image downsample(const Image& src) {
  static constexpr double kTaps[5] = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
  const int w = src.width;
  const int h = src.height;
  Image tmp(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int k = -2; k <= 2; ++k) s += kTaps[k + 2] * src.at(std::clamp(x + k, 0, w - 1), y);
      tmp.at(x, y) = s;
    }
  }
  Image dst(w / 2, h / 2);
  for (int y = 0; y < dst.height; ++y) {
    for (int x = 0; x < dst.width; ++x) {
      double s = 0.0;
      for (int k = -2; k <= 2; ++k) s += kTaps[k + 2] * tmp.at(2 * x, std::clamp(2 * y + k, 0, h - 1));
      dst.at(x, y) = s;
    }
  }
  return dst;
}

double sample_bilinear(const Image& img, double x, double y) {
  x = std::clamp(x, 0.0, double(img.width - 1));
  y = std::clamp(y, 0.0, double(img.height - 1));
  const int x0 = std::min(int(x), img.width - 2 < 0 ? 0 : img.width - 2);
  const int y0 = std::min(int(y), img.height - 2 < 0 ? 0 : img.height - 2);
  const int x1 = std::min(x0 + 1, img.width - 1);
  const int y1 = std::min(y0 + 1, img.height - 1);
  const double fx = x - x0;
  const double fy = y - y0;
  if (fx == 0.0 && fy == 0.0) return img.at(x0, y0);
  return (1 - fx) * (1 - fy) * img.at(x0, y0) + fx * (1 - fy) * img.at(x1, y0) +
         (1 - fx) * fy * img.at(x0, y1) + fx * fy * img.at(x1, y1);
}

// Sums of `values` over (2r+1)^2 windows centred on interior pixels. Entries
// outside [r, w-r) x [r, h-r) are left at zero.
class BoxSum {
 public:
  BoxSum(int w, int h, int r) : w_(w), h_(h), r_(r), integral_(std::size_t(w + 1) * (h + 1), 0.0) {}

  void operator()(const std::vector<double>& values, std::vector<double>& out) {
    for (int y = 0; y < h_; ++y) {
      double row = 0.0;
      for (int x = 0; x < w_; ++x) {
        row += values[std::size_t(y) * w_ + x];
        integral_[idx(x + 1, y + 1)] = integral_[idx(x + 1, y)] + row;
      }
    }
    out.assign(std::size_t(w_) * h_, 0.0);
    for (int y = r_; y < h_ - r_; ++y) {
      for (int x = r_; x < w_ - r_; ++x) {
        const int x0 = x - r_, x1 = x + r_ + 1, y0 = y - r_, y1 = y + r_ + 1;
        out[std::size_t(y) * w_ + x] =
            integral_[idx(x1, y1)] - integral_[idx(x0, y1)] - integral_[idx(x1, y0)] + integral_[idx(x0, y0)];
      }
    }
  }

 private:
  std::size_t idx(int x, int y) const { return std::size_t(y) * (w_ + 1) + x; }
  int w_, h_, r_;
  std::vector<double> integral_;
};

// Copies the nearest interior value into the border band of width r.
template <typename T>
void fill_border(std::vector<T>& values, int w, int h, int r) {
  for (int y = 0; y < h; ++y) {
    const int sy = std::clamp(y, r, h - 1 - r);
    for (int x = 0; x < w; ++x) {
      const int sx = std::clamp(x, r, w - 1 - r);
      if (sx != x || sy != y) values[std::size_t(y) * w + x] = values[std::size_t(sy) * w + sx];
    }
  }
}

struct LevelResult {
  std::vector<double> u, v;
  std::vector<std::uint8_t> weak;
};

void refine_level(const Image& prev, const Image& next, const LucasKanadeOptions& opt, LevelResult& flow) {
  const int w = prev.width;
  const int h = prev.height;
  const int r = opt.window / 2;
  const std::size_t n = std::size_t(w) * h;
  const double area = double(opt.window) * opt.window;

  std::vector<double> ix(n), iy(n);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int xl = std::max(x - 1, 0), xr = std::min(x + 1, w - 1);
      const int yu = std::max(y - 1, 0), yd = std::min(y + 1, h - 1);
      ix[std::size_t(y) * w + x] = (prev.at(xr, y) - prev.at(xl, y)) / std::max(1, xr - xl);
      iy[std::size_t(y) * w + x] = (prev.at(x, yd) - prev.at(x, yu)) / std::max(1, yd - yu);
    }
  }

  BoxSum box(w, h, r);
  std::vector<double> prod(n), gxx, gxy, gyy;
  for (std::size_t i = 0; i < n; ++i) prod[i] = ix[i] * ix[i];
  box(prod, gxx);
  for (std::size_t i = 0; i < n; ++i) prod[i] = ix[i] * iy[i];
  box(prod, gxy);
  for (std::size_t i = 0; i < n; ++i) prod[i] = iy[i] * iy[i];
  box(prod, gyy);

  flow.weak.assign(n, 0);
  for (int y = r; y < h - r; ++y) {
    for (int x = r; x < w - r; ++x) {
      const std::size_t i = std::size_t(y) * w + x;
      const double a = gxx[i] / area, b = gxy[i] / area, c = gyy[i] / area;
      const double min_eig = 0.5 * (a + c) - std::sqrt(0.25 * (a - c) * (a - c) + b * b);
      flow.weak[i] = min_eig < opt.min_eigenvalue ? 1 : 0;
    }
  }

  // Per pixel Gauss-Newton: the whole window is warped by that pixel's own
  // flow, so the bilinear weights are shared across the window.
  for (int y = r; y < h - r; ++y) {
    for (int x = r; x < w - r; ++x) {
      const std::size_t i = std::size_t(y) * w + x;
      if (flow.weak[i]) continue;
      const double det = gxx[i] * gyy[i] - gxy[i] * gxy[i];
      double u = flow.u[i], v = flow.v[i];
      for (int iter = 0; iter < opt.iterations; ++iter) {
        const double fu = std::floor(u), fv = std::floor(v);
        const double ax = u - fu, ay = v - fv;
        const int ox = int(fu), oy = int(fv);
        const bool inside = x - r + ox >= 0 && x + r + ox + 1 < w && y - r + oy >= 0 && y + r + oy + 1 < h;
        double bx = 0.0, by = 0.0;
        for (int yy = y - r; yy <= y + r; ++yy) {
          for (int xx = x - r; xx <= x + r; ++xx) {
            double warped;
            if (inside) {
              const double* row0 = &next.pixels[std::size_t(yy + oy) * w + (xx + ox)];
              const double* row1 = row0 + w;
              warped = (1 - ay) * ((1 - ax) * row0[0] + ax * row0[1]) + ay * ((1 - ax) * row1[0] + ax * row1[1]);
            } else {
              warped = sample_bilinear(next, xx + u, yy + v);
            }
            const std::size_t j = std::size_t(yy) * w + xx;
            const double it = warped - prev.pixels[j];
            bx += ix[j] * it;
            by += iy[j] * it;
          }
        }
        const double du = -(gyy[i] * bx - gxy[i] * by) / det;
        const double dv = -(gxx[i] * by - gxy[i] * bx) / det;
        u += du;
        v += dv;
        if (du * du + dv * dv < 1e-8) break;
      }
      flow.u[i] = u;
      flow.v[i] = v;
    }
  }
  fill_border(flow.u, w, h, r);
  fill_border(flow.v, w, h, r);
  fill_border(flow.weak, w, h, r);
}

}  // namespace

FlowField lucas_kanade(const Image& prev, const Image& next, const LucasKanadeOptions& opt) {
  prev.validate();
  next.validate();
  if (prev.width != next.width || prev.height != next.height) {
    fail(ErrorCode::kShapeMismatch, "lucas_kanade: frame sizes differ");
  }
  require(opt.window >= 3 && opt.window % 2 == 1, "lucas_kanade: window must be odd and >= 3");
  require(opt.levels >= 1 && opt.levels <= 16, "lucas_kanade: levels out of range");
  require(opt.iterations >= 1, "lucas_kanade: iterations must be >= 1");
  const int coarse_w = prev.width >> (opt.levels - 1);
  const int coarse_h = prev.height >> (opt.levels - 1);
  require(std::min(coarse_w, coarse_h) >= opt.window, "lucas_kanade: coarsest pyramid level smaller than window");

  std::vector<Image> pyr_prev{prev}, pyr_next{next};
  for (int l = 1; l < opt.levels; ++l) {
    pyr_prev.push_back(downsample(pyr_prev.back()));
    pyr_next.push_back(downsample(pyr_next.back()));
  }

  LevelResult flow;
  for (int l = opt.levels - 1; l >= 0; --l) {
    const int w = pyr_prev[l].width;
    const int h = pyr_prev[l].height;
    std::vector<double> u(std::size_t(w) * h, 0.0), v(std::size_t(w) * h, 0.0);
    if (l + 1 < opt.levels) {
      const int pw = pyr_prev[l + 1].width;
      const int ph = pyr_prev[l + 1].height;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const std::size_t src = std::size_t(std::min(y / 2, ph - 1)) * pw + std::min(x / 2, pw - 1);
          u[std::size_t(y) * w + x] = 2.0 * flow.u[src];
          v[std::size_t(y) * w + x] = 2.0 * flow.v[src];
        }
      }
    }
    flow.u = std::move(u);
    flow.v = std::move(v);
    refine_level(pyr_prev[l], pyr_next[l], opt, flow);
  }

  FlowField out(prev.width, prev.height);
  out.low_confidence = std::move(flow.weak);
  for (std::size_t i = 0; i < out.u.size(); ++i) {
    if (out.low_confidence[i]) continue;
    out.u[i] = flow.u[i];
    out.v[i] = flow.v[i];
  }
  return out;
}

FlowField mean_pool(const FlowField& field, int k) {
  field.validate();
  require(k >= 1, "mean_pool: pool size must be >= 1");
  if (field.width % k != 0 || field.height % k != 0) {
    fail(ErrorCode::kShapeMismatch, "mean_pool: pool size does not divide the field size");
  }
  FlowField out(field.width / k, field.height / k);
  const double inv = 1.0 / (double(k) * k);
  for (int by = 0; by < out.height; ++by) {
    for (int bx = 0; bx < out.width; ++bx) {
      double su = 0.0, sv = 0.0;
      for (int y = by * k; y < (by + 1) * k; ++y) {
        for (int x = bx * k; x < (bx + 1) * k; ++x) {
          su += field.u[field.index(x, y)];
          sv += field.v[field.index(x, y)];
        }
      }
      out.u[out.index(bx, by)] = su * inv;
      out.v[out.index(bx, by)] = sv * inv;
    }
  }
  return out;
}

}  // namespace locfuse
