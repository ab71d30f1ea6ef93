#include "docdet/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace docdet {

namespace {

enum class ElementKind { text, title, list, table, figure, band };

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

bool contains(const std::string& s, const char* sub) { return s.find(sub) != std::string::npos; }

ElementKind kind_for(const std::string& raw) {
  const std::string name = lower(raw);
  if (contains(name, "footer") || contains(name, "page-header")) return ElementKind::band;
  if (name == "title" || contains(name, "section")) return ElementKind::title;
  if (contains(name, "list")) return ElementKind::list;
  if (contains(name, "table")) return ElementKind::table;
  if (contains(name, "figure") || contains(name, "picture")) return ElementKind::figure;
  return ElementKind::text;
}

bool is_thin_kind(ElementKind k) { return k == ElementKind::title || k == ElementKind::band; }

int weighted_pick(Rng& rng, const std::vector<int>& idx, const std::vector<double>& weights) {
  double total = 0;
  for (int i : idx) total += weights[i];
  double r = rng.uniform() * total;
  int last = idx.front();
  for (int i : idx) {
    if (weights[i] <= 0) continue;
    if (r < weights[i]) return i;
    r -= weights[i];
    last = i;
  }
  return last;
}

struct SizeRange {
  double wlo, whi, hlo, hhi;
};

SizeRange size_range(ElementKind k) {
  switch (k) {
    case ElementKind::text: return {0.25, 0.60, 0.08, 0.26};
    case ElementKind::list: return {0.20, 0.45, 0.10, 0.28};
    case ElementKind::table: return {0.30, 0.60, 0.12, 0.30};
    case ElementKind::figure: return {0.20, 0.45, 0.12, 0.32};
    case ElementKind::title: return {0.20, 0.50, 0.018, 0.045};
    case ElementKind::band: return {0.30, 0.75, 0.012, 0.030};
  }
  return {0.2, 0.4, 0.1, 0.2};
}

void render_lines(Image& img, int x1, int y1, int x2, int y2, Rng& rng, bool bullets) {
  const int base = rng.uniform_int(232, 242);
  fill_rect(img, x1, y1, x2, y2, {static_cast<unsigned char>(base), static_cast<unsigned char>(base),
                                  static_cast<unsigned char>(base)});
  const int t = (y2 - y1) >= 24 ? 2 : 1;
  const int step = t + 2 + rng.uniform_int(0, 2);
  const int g = rng.uniform_int(70, 110);
  const Rgb ink{static_cast<unsigned char>(g), static_cast<unsigned char>(g),
                static_cast<unsigned char>(g)};
  const int indent = bullets ? t + 3 : 0;
  for (int yy = y1; yy + t <= y2; yy += step) {
    if (bullets)
      fill_rect(img, x1, yy, std::min(x1 + t + 1, x2), std::min(yy + t + 1, y2), {40, 40, 40});
    fill_rect(img, x1 + indent, yy, x2, yy + t, ink);
  }
  fill_rect(img, x1, y2 - t, x2, y2, ink);
}

void render_table(Image& img, int x1, int y1, int x2, int y2, Rng& rng) {
  fill_rect(img, x1, y1, x2, y2, {252, 252, 252});
  const int ncols = rng.uniform_int(2, 4);
  const int nrows = rng.uniform_int(2, 5);
  const int bt = (y2 - y1) >= 40 ? 2 : 1;
  fill_rect(img, x1, y1, x2, y1 + std::max(2, (y2 - y1) / (nrows + 1)), {225, 225, 225});
  for (int k = 1; k < ncols; ++k) {
    const int xx = x1 + k * (x2 - x1) / ncols;
    fill_rect(img, xx, y1, xx + 1, y2, {150, 150, 150});
  }
  for (int k = 1; k < nrows; ++k) {
    const int yy = y1 + k * (y2 - y1) / nrows;
    fill_rect(img, x1, yy, x2, yy + 1, {150, 150, 150});
  }
  draw_rect_outline(img, x1, y1, x2, y2, bt, {40, 40, 40});
}

void render_figure(Image& img, int x1, int y1, int x2, int y2, Rng& rng) {
  static const Rgb palette[] = {
      {86, 119, 158}, {150, 122, 92}, {114, 150, 110}, {140, 100, 140}, {182, 154, 96}};
  const Rgb c = palette[rng.uniform_int(0, 4)];
  fill_rect(img, x1, y1, x2, y2, c);
  const int ix = (x2 - x1) / 4, iy = (y2 - y1) / 4;
  fill_rect(img, x1 + ix, y1 + iy, x2 - ix, y2 - iy,
            {static_cast<unsigned char>(std::min(255, c.r + 36)),
             static_cast<unsigned char>(std::min(255, c.g + 36)),
             static_cast<unsigned char>(std::min(255, c.b + 36))});
  draw_rect_outline(img, x1, y1, x2, y2, 1,
                    {static_cast<unsigned char>(c.r / 2), static_cast<unsigned char>(c.g / 2),
                     static_cast<unsigned char>(c.b / 2)});
}

void render_element(Image& img, ElementKind kind, const Box& b, Rng& rng) {
  const int x1 = static_cast<int>(b.x1), y1 = static_cast<int>(b.y1);
  const int x2 = static_cast<int>(b.x2), y2 = static_cast<int>(b.y2);
  switch (kind) {
    case ElementKind::text: render_lines(img, x1, y1, x2, y2, rng, false); break;
    case ElementKind::list: render_lines(img, x1, y1, x2, y2, rng, true); break;
    case ElementKind::table: render_table(img, x1, y1, x2, y2, rng); break;
    case ElementKind::figure: render_figure(img, x1, y1, x2, y2, rng); break;
    case ElementKind::title: {
      const int g = rng.uniform_int(15, 50);
      fill_rect(img, x1, y1, x2, y2,
                {static_cast<unsigned char>(g), static_cast<unsigned char>(g),
                 static_cast<unsigned char>(g)});
      break;
    }
    case ElementKind::band: {
      const int g = rng.uniform_int(120, 170);
      fill_rect(img, x1, y1, x2, y2,
                {static_cast<unsigned char>(g), static_cast<unsigned char>(g),
                 static_cast<unsigned char>(g)});
      break;
    }
  }
}

}  // namespace

void LayoutSpec::validate() const {
  if (page_height < 32 || page_width < 32)
    throw std::invalid_argument("LayoutSpec: page must be at least 32x32");
  if (categories.empty() || categories.size() != category_weights.size())
    throw std::invalid_argument("LayoutSpec: categories and weights must align and be non-empty");
  double total = 0;
  for (double w : category_weights) {
    if (w < 0) throw std::invalid_argument("LayoutSpec: negative category weight");
    total += w;
  }
  if (total <= 0) throw std::invalid_argument("LayoutSpec: weights must sum to a positive value");
  if (min_elements < 1 || max_elements < min_elements)
    throw std::invalid_argument("LayoutSpec: bad element count range");
  if (small_fraction < 0 || small_fraction > 1)
    throw std::invalid_argument("LayoutSpec: small_fraction outside [0, 1]");
  if (overlap_tolerance < 0 || overlap_tolerance > 1)
    throw std::invalid_argument("LayoutSpec: overlap_tolerance outside [0, 1]");
}

LayoutSpec five_category_spec() {
  LayoutSpec spec;
  spec.categories = {"text", "title", "list", "table", "figure"};
  spec.category_weights = {0.40, 0.15, 0.15, 0.15, 0.15};
  return spec;
}

LayoutSpec eleven_category_spec() {
  LayoutSpec spec;
  spec.categories = {"caption",     "footnote", "formula",        "list-item",
                     "page-footer", "page-header", "picture",     "section-header",
                     "table",       "text",     "title"};
  spec.category_weights = {0.05, 0.03, 0.05, 0.13, 0.04, 0.04, 0.10, 0.10, 0.10, 0.31, 0.05};
  return spec;
}

LayoutSample generate_page(const LayoutSpec& spec, Rng& rng) {
  spec.validate();
  const int H = spec.page_height, W = spec.page_width;
  const int m = std::max(2, std::min(H, W) / 32);

  std::vector<ElementKind> kinds(spec.categories.size());
  std::vector<int> thin_pool, body_pool;
  for (std::size_t i = 0; i < spec.categories.size(); ++i) {
    kinds[i] = kind_for(spec.categories[i]);
    if (spec.category_weights[i] <= 0) continue;
    (is_thin_kind(kinds[i]) ? thin_pool : body_pool).push_back(static_cast<int>(i));
  }

  const int n = rng.uniform_int(spec.min_elements, spec.max_elements);
  int n_thin = thin_pool.empty() ? 0 : static_cast<int>(std::lround(n * spec.small_fraction));
  n_thin = std::min(n_thin, n);
  if (body_pool.empty()) n_thin = n;
  std::vector<int> cats;
  for (int i = 0; i < n - n_thin; ++i) cats.push_back(weighted_pick(rng, body_pool, spec.category_weights));
  for (int i = 0; i < n_thin; ++i) cats.push_back(weighted_pick(rng, thin_pool, spec.category_weights));

  LayoutSample sample;
  sample.image = Image(H, W);
  std::vector<Box> placed;
  for (int ci : cats) {
    const ElementKind kind = kinds[ci];
    const SizeRange r = size_range(kind);
    const bool at_bottom = contains(lower(spec.categories[ci]), "footer");
    for (int attempt = 0; attempt < 80; ++attempt) {
      int w = static_cast<int>(std::lround(W * rng.uniform(r.wlo, r.whi)));
      int h = static_cast<int>(std::lround(H * rng.uniform(r.hlo, r.hhi)));
      w = std::clamp(w, 4, W - 2 * m);
      h = std::clamp(h, is_thin_kind(kind) ? 2 : 5, H - 2 * m);
      const int x = rng.uniform_int(m, W - m - w);
      const int y = kind == ElementKind::band ? (at_bottom ? H - m - h : m)
                                              : rng.uniform_int(m, H - m - h);
      const Box box{static_cast<double>(x), static_cast<double>(y), static_cast<double>(x + w),
                    static_cast<double>(y + h)};
      bool clear = true;
      for (const Box& other : placed)
        if (iou(box, other) > spec.overlap_tolerance) {
          clear = false;
          break;
        }
      if (!clear) continue;
      render_element(sample.image, kind, box, rng);
      placed.push_back(box);
      sample.annotations.push_back({box, ci + 1});
      break;
    }
  }
  if (static_cast<int>(sample.annotations.size()) < spec.min_elements)
    throw std::runtime_error("generate_page: could not place " +
                             std::to_string(spec.min_elements) + " elements on a " +
                             std::to_string(W) + "x" + std::to_string(H) + " page");
  return sample;
}

std::vector<LayoutSample> generate_corpus(const LayoutSpec& spec, std::uint64_t seed, int count,
                                          int first_id) {
  std::vector<LayoutSample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    Rng rng = Rng::child(seed, static_cast<std::uint64_t>(i));
    out.push_back(generate_page(spec, rng));
    out.back().image_id = first_id + i;
  }
  return out;
}

}  // namespace docdet
