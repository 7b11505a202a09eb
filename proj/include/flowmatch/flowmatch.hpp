#pragma once

#include "flowmatch/config.hpp"
#include "flowmatch/core.hpp"
#include "flowmatch/coupling.hpp"
#include "flowmatch/data.hpp"
#include "flowmatch/eval.hpp"
#include "flowmatch/experiment.hpp"
#include "flowmatch/integrate.hpp"
#include "flowmatch/net.hpp"
#include "flowmatch/paths.hpp"
#include "flowmatch/plot.hpp"
#include "flowmatch/report.hpp"
#include "flowmatch/rng.hpp"
#include "flowmatch/trainer.hpp"
