#pragma once

#include "mmf/autodiff.hpp"
#include "mmf/config.hpp"
#include "mmf/config_io.hpp"
#include "mmf/container.hpp"
#include "mmf/encoders.hpp"
#include "mmf/error.hpp"
#include "mmf/evalharness.hpp"
#include "mmf/fusion.hpp"
#include "mmf/layers.hpp"
#include "mmf/manifest.hpp"
#include "mmf/metrics.hpp"
#include "mmf/model.hpp"
#include "mmf/network.hpp"
#include "mmf/objectives.hpp"
#include "mmf/ops.hpp"
#include "mmf/optimizer.hpp"
#include "mmf/persistence.hpp"
#include "mmf/pipeline.hpp"
#include "mmf/record.hpp"
#include "mmf/rng.hpp"
#include "mmf/synthcohort.hpp"
#include "mmf/tensor.hpp"
#include "mmf/training.hpp"
