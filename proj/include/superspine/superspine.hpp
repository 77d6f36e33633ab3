#pragma once

#include "superspine/errors.hpp"
#include "superspine/model.hpp"
#include "superspine/scenario_io.hpp"
#include "superspine/grid.hpp"
#include "superspine/spectral.hpp"
#include "superspine/evolve.hpp"
#include "superspine/rng.hpp"
#include "superspine/parallel.hpp"
#include "superspine/stats.hpp"
#include "superspine/simulate.hpp"
#include "superspine/criterion.hpp"
#include "superspine/report.hpp"
