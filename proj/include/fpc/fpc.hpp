// Umbrella header.
#pragma once

#include "fpc/archive.hpp"
#include "fpc/attention.hpp"
#include "fpc/backbone.hpp"
#include "fpc/common.hpp"
#include "fpc/config.hpp"
#include "fpc/dataset.hpp"
#include "fpc/gradcam.hpp"
#include "fpc/gradcheck.hpp"
#include "fpc/graph.hpp"
#include "fpc/image.hpp"
#include "fpc/manifest.hpp"
#include "fpc/metrics.hpp"
#include "fpc/model.hpp"
#include "fpc/ops.hpp"
#include "fpc/params.hpp"
#include "fpc/rng.hpp"
#include "fpc/synth.hpp"
#include "fpc/tensor.hpp"
#include "fpc/train.hpp"
