#pragma once

#include "modarith/error.hpp"
#include "modarith/core_dist.hpp"
#include "modarith/providers.hpp"
#include "modarith/remote.hpp"
#include "modarith/formula.hpp"
#include "modarith/engine.hpp"
#include "modarith/speculative.hpp"
#include "modarith/stats.hpp"
#include "modarith/evalharness.hpp"
#include "modarith/config.hpp"
