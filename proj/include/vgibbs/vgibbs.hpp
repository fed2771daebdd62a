#pragma once

#include "vgibbs/core.hpp"
#include "vgibbs/rng.hpp"
#include "vgibbs/mlp.hpp"
#include "vgibbs/optim.hpp"
#include "vgibbs/gaussians.hpp"
#include "vgibbs/famodel.hpp"
#include "vgibbs/dataset.hpp"
#include "vgibbs/csv_io.hpp"
#include "vgibbs/emfit.hpp"
#include "vgibbs/imputers.hpp"
#include "vgibbs/varmodel.hpp"
#include "vgibbs/vgi.hpp"
#include "vgibbs/metrics.hpp"
#include "vgibbs/runner.hpp"
