#pragma once

namespace isamp {

// Degeneracy guards shared across estimators. Both sit far below any value
// arising at survey-scale weights.
inline constexpr double kEpsDenominator = 1e-8;
inline constexpr double kEpsPi = 1e-10;

// Floor on pi_bar inside quadrature integrands. Far tail nodes can leave the
// region where the fitted weight moment exists (m*phi <= 1), where the raw
// reciprocal would let off-support nodes dominate fine rules; capping
// E(W|x,y) at 1/kEpsPiQuad keeps Q=20 and Q=40 results within 1e-6 of each
// other while staying two orders of magnitude above any inclusion
// probability a survey design produces.
inline constexpr double kEpsPiQuad = 1e-4;

}  // namespace isamp
