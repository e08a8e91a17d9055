#pragma once

// Everything in one include.

#include "mstdiff/errors.hpp"
#include "mstdiff/numerics/autodiff.hpp"
#include "mstdiff/numerics/dft.hpp"
#include "mstdiff/numerics/grad_check.hpp"
#include "mstdiff/numerics/linalg.hpp"
#include "mstdiff/numerics/params.hpp"
#include "mstdiff/numerics/rng.hpp"
#include "mstdiff/numerics/tensor.hpp"
#include "mstdiff/wavelet.hpp"
#include "mstdiff/cdiff.hpp"
#include "mstdiff/ddiff.hpp"
#include "mstdiff/ukg.hpp"
#include "mstdiff/vqvae.hpp"
#include "mstdiff/denoiser.hpp"
#include "mstdiff/engine.hpp"
#include "mstdiff/metrics.hpp"
#include "mstdiff/dataset.hpp"
#include "mstdiff/checkpoint.hpp"
#include "mstdiff/dataio.hpp"
#include "mstdiff/config.hpp"
#include "mstdiff/pipeline.hpp"
