#pragma once

// Umbrella header for the plate QC pipeline.

#include "cfu/agents.hpp"
#include "cfu/clock.hpp"
#include "cfu/config.hpp"
#include "cfu/error.hpp"
#include "cfu/gateway.hpp"
#include "cfu/image.hpp"
#include "cfu/metrics.hpp"
#include "cfu/orchestrator.hpp"
#include "cfu/registry.hpp"
#include "cfu/report.hpp"
#include "cfu/rng.hpp"
#include "cfu/sha256.hpp"
#include "cfu/store.hpp"
#include "cfu/synthgen.hpp"
#include "cfu/types.hpp"
#include "cfu/vision.hpp"
