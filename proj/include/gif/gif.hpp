#ifndef GIF_GIF_HPP
#define GIF_GIF_HPP

// Core library. The pipeline driver in gif/experiment.hpp is separate because
// it also needs spdlog and OpenSSL.

#include "gif/autograd.hpp"
#include "gif/condnet.hpp"
#include "gif/design.hpp"
#include "gif/diffusion.hpp"
#include "gif/error.hpp"
#include "gif/features.hpp"
#include "gif/metrics.hpp"
#include "gif/netgraph.hpp"
#include "gif/pdn.hpp"
#include "gif/rng.hpp"
#include "gif/routing.hpp"
#include "gif/tensor.hpp"
#include "gif/tensor_io.hpp"

#endif  // GIF_GIF_HPP
