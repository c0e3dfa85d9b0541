#pragma once

// Scalar precision is a build-time choice. The library is compiled twice:
// once with 32-bit reals for training and inference, once with NPTT_DOUBLE
// for gradient checks. Each build lives in its own inline namespace so both
// can be linked into the same executable.

#ifdef NPTT_DOUBLE
#define NPTT_PRECISION_NS f64
#else
#define NPTT_PRECISION_NS f32
#endif

#define NPTT_NAMESPACE_BEGIN \
  namespace nptt {           \
  inline namespace NPTT_PRECISION_NS {
#define NPTT_NAMESPACE_END \
  }                        \
  }

NPTT_NAMESPACE_BEGIN

#ifdef NPTT_DOUBLE
using Real = double;
#else
using Real = float;
#endif

NPTT_NAMESPACE_END
