#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "deid/facemask.hpp"
#include "deid/imagecore.hpp"

namespace deid {

struct BlendError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Per-level Gaussian widths: sigma_1 = 0 (identity), sigma_l = 2^(l-2) after.
struct FilterBank {
    int levels = 10;
    std::vector<double> sigmas;

    static FilterBank standard(int levels = 10);
    void validate() const;
};

// Which image a mask weight of 1 selects in merge_complete.
enum class MaskRole {
    SelectsGenerated,  // mask = 1 keeps B (the de-identified face)
    SelectsInput,      // mask = 1 keeps A, the weighting printed in the merge pseudocode
};

std::string to_string(MaskRole role);
MaskRole parse_mask_role(const std::string& s);

// Circular convolution with a Gaussian, done as multiplication by the transfer
// function exp(-2 pi^2 sigma^2 (u^2 + v^2)) on normalized frequencies.
// sigma == 0 returns the input unchanged.
Image gaussian_filter(const Image& img, double sigma);

// Filters one image at several widths, sharing the forward transform.
std::vector<Image> gaussian_stack(const Image& img, const std::vector<double>& sigmas);

// The merge pseudocode run verbatim: sum over l = 2..n of
//   G_M^{l-1} (G_A^l - G_A^{l-1}) + (1 - G_M^{l-1}) (G_B^l - G_B^{l-1}).
// No base band is added, so the output is a band-pass image.
Image merge_literal(const Image& a, const Image& b, const BlendMask& m, const FilterBank& bank);

// Multi-band blend with the coarsest level restored, so that a constant mask
// reproduces one input exactly. Bands are sharp-minus-smooth (G^{l-1} - G^l).
Image merge_complete(const Image& a, const Image& b, const BlendMask& m, const FilterBank& bank,
                     MaskRole role = MaskRole::SelectsGenerated);

// G_M^n * face^n + (1 - G_M^n) * back^n at the coarsest level.
Image base_band(const Image& face, const Image& back, const BlendMask& m, const FilterBank& bank);

// merge_complete, then histogram-match to A and clamp to [0,1].
Image merge_and_match(const Image& a, const Image& b, const BlendMask& m, const FilterBank& bank,
                      MaskRole role = MaskRole::SelectsGenerated);

}  // namespace deid
