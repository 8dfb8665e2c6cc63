#pragma once

#include "grf/autodiff.hpp"
#include "grf/checkpoint.hpp"
#include "grf/chem.hpp"
#include "grf/error.hpp"
#include "grf/flow.hpp"
#include "grf/graph.hpp"
#include "grf/inversion.hpp"
#include "grf/likelihood.hpp"
#include "grf/linalg.hpp"
#include "grf/parallel.hpp"
#include "grf/random.hpp"
#include "grf/selfcheck.hpp"
#include "grf/training.hpp"
