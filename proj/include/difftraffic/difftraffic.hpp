#pragma once

#include "difftraffic/arz.hpp"
#include "difftraffic/core.hpp"
#include "difftraffic/coupling.hpp"
#include "difftraffic/demos.hpp"
#include "difftraffic/engine.hpp"
#include "difftraffic/errors.hpp"
#include "difftraffic/finite_diff.hpp"
#include "difftraffic/fvm.hpp"
#include "difftraffic/harness.hpp"
#include "difftraffic/idm.hpp"
#include "difftraffic/linalg.hpp"
#include "difftraffic/optimize.hpp"
#include "difftraffic/report.hpp"
#include "difftraffic/scenario_io.hpp"
#include "difftraffic/validate.hpp"
