#pragma once

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "glyphdiffuse/errors.hpp"
#include "glyphdiffuse/tensor.hpp"

// Procedural letterforms for the toy corpus: each lowercase letter is a set
// of polylines in a unit box (x right, y down, baseline at y=1). Words are
// laid out in fixed cells, warped by per-style slant/thickness/wobble, and
// rasterized as anti-aliased capsules onto a white [-1,1] canvas.

namespace gdf {

struct StyleParams {
    double slant = 0.0;        // horizontal shear, px of lean per px of height
    double thickness = 1.2;    // stroke radius in pixels
    double wobble_amp = 0.0;   // baseline wave amplitude in pixels
    double wobble_freq = 1.0;  // waves across the canvas width
};

namespace glyphs {

using Point = std::array<double, 2>;
using Stroke = std::vector<Point>;
using Glyph = std::vector<Stroke>;

inline Stroke arc(double cx, double cy, double rx, double ry, double deg0, double deg1,
                  int n = 12) {
    Stroke s;
    for (int i = 0; i <= n; ++i) {
        const double a = (deg0 + (deg1 - deg0) * double(i) / n) * M_PI / 180.0;
        s.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
    }
    return s;
}

inline const std::map<char, Glyph>& table() {
    static const std::map<char, Glyph> t = [] {
        std::map<char, Glyph> g;
        const double top = 0.35, bot = 1.0, mid = 0.675;  // x-height band
        g['a'] = {arc(0.45, mid, 0.24, 0.32, 0, 360), {{0.69, top}, {0.69, bot}}};
        g['b'] = {{{0.3, 0.05}, {0.3, bot}}, arc(0.52, mid, 0.22, 0.32, 0, 360)};
        g['c'] = {arc(0.5, mid, 0.25, 0.32, 40, 320)};
        g['d'] = {arc(0.48, mid, 0.22, 0.32, 0, 360), {{0.7, 0.05}, {0.7, bot}}};
        g['e'] = {{{0.26, mid}, {0.74, mid}}, arc(0.5, mid, 0.24, 0.32, 0, -290)};
        g['f'] = {{{0.72, 0.2}, {0.6, 0.1}, {0.5, 0.16}, {0.5, bot}},
                  {{0.3, 0.45}, {0.7, 0.45}}};
        g['g'] = {arc(0.45, 0.55, 0.22, 0.25, 0, 360),
                  {{0.67, 0.32}, {0.67, 0.85}, {0.58, 1.0}, {0.33, 0.94}}};
        g['h'] = {{{0.3, 0.05}, {0.3, bot}},
                  {{0.3, 0.55}, {0.45, top}, {0.65, 0.42}, {0.7, 0.62}, {0.7, bot}}};
        g['i'] = {{{0.5, top}, {0.5, bot}}, {{0.5, 0.14}, {0.5, 0.17}}};
        g['j'] = {{{0.55, top}, {0.55, 0.85}, {0.48, 1.0}, {0.3, 0.94}},
                  {{0.55, 0.14}, {0.55, 0.17}}};
        g['k'] = {{{0.3, 0.05}, {0.3, bot}}, {{0.68, top}, {0.3, 0.7}},
                  {{0.45, 0.57}, {0.72, bot}}};
        g['l'] = {{{0.5, 0.05}, {0.5, bot}}};
        g['m'] = {{{0.24, bot}, {0.24, top}},
                  {{0.24, 0.5}, {0.34, top}, {0.48, 0.5}, {0.48, bot}},
                  {{0.48, 0.5}, {0.6, top}, {0.76, 0.5}, {0.76, bot}}};
        g['n'] = {{{0.3, bot}, {0.3, top}},
                  {{0.3, 0.5}, {0.45, top}, {0.65, 0.45}, {0.7, 0.65}, {0.7, bot}}};
        g['o'] = {arc(0.5, mid, 0.25, 0.32, 0, 360)};
        g['p'] = {{{0.3, top}, {0.3, bot}}, arc(0.52, 0.56, 0.22, 0.21, 0, 360)};
        g['q'] = {arc(0.48, 0.56, 0.22, 0.21, 0, 360), {{0.7, top}, {0.7, bot}}};
        g['r'] = {{{0.35, top}, {0.35, bot}},
                  {{0.35, 0.55}, {0.45, 0.37}, {0.62, 0.37}, {0.7, 0.48}}};
        g['s'] = {{{0.7, 0.42}, {0.55, 0.33}, {0.38, 0.38}, {0.36, 0.5}, {0.5, 0.6},
                   {0.62, 0.7}, {0.6, 0.85}, {0.45, 0.95}, {0.3, 0.88}}};
        g['t'] = {{{0.5, 0.1}, {0.5, 0.85}, {0.58, 0.98}, {0.7, 0.93}},
                  {{0.3, 0.4}, {0.7, 0.4}}};
        g['u'] = {{{0.3, top}, {0.3, 0.8}, {0.38, 0.97}, {0.55, 0.97}, {0.68, 0.84}},
                  {{0.7, top}, {0.7, bot}}};
        g['v'] = {{{0.3, top}, {0.5, bot}, {0.7, top}}};
        g['w'] = {{{0.22, top}, {0.35, bot}, {0.5, 0.55}, {0.65, bot}, {0.78, top}}};
        g['x'] = {{{0.3, top}, {0.7, bot}}, {{0.7, top}, {0.3, bot}}};
        g['y'] = {{{0.3, top}, {0.52, 0.74}}, {{0.7, top}, {0.38, bot}}};
        g['z'] = {{{0.3, top}, {0.7, top}, {0.3, bot}, {0.7, bot}}};
        return g;
    }();
    return t;
}

inline bool supported(char c) { return table().count(c) > 0; }

// Draws one capsule (segment with radius r) with ~1px smooth edges; ink is
// accumulated as max coverage.
inline void draw_segment(std::vector<double>& cov, int h, int w, double x0, double y0, double x1,
                         double y1, double r) {
    const double pad = r + 1.0;
    const int ylo = std::max(0, int(std::floor(std::min(y0, y1) - pad)));
    const int yhi = std::min(h - 1, int(std::ceil(std::max(y0, y1) + pad)));
    const int xlo = std::max(0, int(std::floor(std::min(x0, x1) - pad)));
    const int xhi = std::min(w - 1, int(std::ceil(std::max(x0, x1) + pad)));
    const double dx = x1 - x0, dy = y1 - y0;
    const double len2 = dx * dx + dy * dy;
    for (int y = ylo; y <= yhi; ++y)
        for (int x = xlo; x <= xhi; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            double t = len2 > 0.0 ? ((px - x0) * dx + (py - y0) * dy) / len2 : 0.0;
            t = std::min(1.0, std::max(0.0, t));
            const double ex = px - (x0 + t * dx), ey = py - (y0 + t * dy);
            const double d = std::sqrt(ex * ex + ey * ey);
            const double c = std::min(1.0, std::max(0.0, r + 0.5 - d));
            double& slot = cov[size_t(y) * size_t(w) + size_t(x)];
            slot = std::max(slot, c);
        }
}

}  // namespace glyphs

// Renders a word with the given style. `phase` and `jitter_x` give per-sample
// handwriting variation; styles stay separable because they move slant,
// thickness, and wobble far more than the jitter does.
inline Tensor render_word(const std::string& word, const StyleParams& style, int height,
                          int width, double phase = 0.0, double jitter_x = 0.0) {
    if (word.empty() || word.size() > 10)
        throw validation_error("render_word: word length " + std::to_string(word.size()) +
                               " outside [1, 10]");
    for (char c : word)
        if (!glyphs::supported(c))
            throw validation_error(std::string("render_word: unsupported character '") + c +
                                   "' (lowercase a-z only)");
    if (height < 16 || width < 16)
        throw validation_error("render_word: canvas too small");

    const int n = int(word.size());
    const double margin_y = 3.0;
    const double gh = height - 2.0 * margin_y;           // glyph box height
    const double cell = double(width - 8) / n;           // layout cell width
    const double gw = std::min(cell - 2.0, 0.72 * gh);   // glyph box width
    const double x_start = (width - cell * n) / 2.0 + jitter_x;
    const double baseline = margin_y + gh;

    std::vector<double> cov(size_t(height) * size_t(width), 0.0);
    for (int k = 0; k < n; ++k) {
        const double bx = x_start + k * cell + (cell - gw) / 2.0;
        auto warp = [&](const glyphs::Point& p) -> glyphs::Point {
            double px = bx + p[0] * gw;
            double py = margin_y + p[1] * gh;
            px += style.slant * (baseline - py);
            py += style.wobble_amp *
                  std::sin(2.0 * M_PI * style.wobble_freq * px / width + phase);
            return {px, py};
        };
        for (const auto& stroke : glyphs::table().at(word[size_t(k)])) {
            for (size_t i = 0; i + 1 < stroke.size(); ++i) {
                // subdivide so the wobble bends the stroke, not just its ends
                const double sx = (stroke[i + 1][0] - stroke[i][0]) * gw;
                const double sy = (stroke[i + 1][1] - stroke[i][1]) * gh;
                const int steps = std::max(1, int(std::ceil(std::hypot(sx, sy) / 3.0)));
                glyphs::Point prev = warp(stroke[i]);
                for (int s = 1; s <= steps; ++s) {
                    const double t = double(s) / steps;
                    const glyphs::Point raw = {
                        stroke[i][0] + (stroke[i + 1][0] - stroke[i][0]) * t,
                        stroke[i][1] + (stroke[i + 1][1] - stroke[i][1]) * t};
                    const glyphs::Point cur = warp(raw);
                    glyphs::draw_segment(cov, height, width, prev[0], prev[1], cur[0], cur[1],
                                         style.thickness);
                    prev = cur;
                }
            }
        }
    }

    Tensor img({1, height, width});
    float* d = img.mutable_data();
    for (size_t i = 0; i < cov.size(); ++i) d[i] = float(1.0 - 2.0 * cov[i]);
    return img;
}

}  // namespace gdf
