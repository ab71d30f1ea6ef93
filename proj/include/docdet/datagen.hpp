#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "docdet/geometry.hpp"
#include "docdet/image.hpp"
#include "docdet/random.hpp"

namespace docdet {

struct LayoutSample {
  int image_id = 0;
  Image image;
  std::vector<LabeledBox> annotations;  // category ids are 1-based into the spec's category list
};

struct LayoutSpec {
  int page_height = 256;
  int page_width = 256;
  std::vector<std::string> categories;   // names; id = index + 1
  std::vector<double> category_weights;  // same order as categories
  int min_elements = 4;
  int max_elements = 9;
  double small_fraction = 0.25;    // share of elements drawn from the thin kinds
                                   // (titles, section headers, page bands)
  double overlap_tolerance = 0.05;  // max pairwise IoU between placed elements

  void validate() const;  // throws std::invalid_argument
};

LayoutSpec five_category_spec();    // text, title, list, table, figure
LayoutSpec eleven_category_spec();  // finer-grained newspaper/report class list

// Stylized page render: hatched text blocks, bold title bars, grid-ruled
// tables, filled figures, thin margin bands. Every annotation is the tight
// bounds of its element's ink, inside the page, with area >= 4 px².
// Deterministic in (spec, rng state). Throws std::runtime_error when fewer
// than spec.min_elements fit after bounded retries.
LayoutSample generate_page(const LayoutSpec& spec, Rng& rng);

// Pages use independent child streams of `seed`, so any page is reproducible
// without generating its predecessors. Ids run first_id, first_id+1, ...
std::vector<LayoutSample> generate_corpus(const LayoutSpec& spec, std::uint64_t seed, int count,
                                          int first_id = 1);

}  // namespace docdet
