#pragma once

#include "bpsm/association.hpp"
#include "bpsm/cloud_io.hpp"
#include "bpsm/errors.hpp"
#include "bpsm/harness.hpp"
#include "bpsm/imls.hpp"
#include "bpsm/lidar_sim.hpp"
#include "bpsm/measurement_model.hpp"
#include "bpsm/ndt.hpp"
#include "bpsm/optimize.hpp"
#include "bpsm/oracle_check.hpp"
#include "bpsm/pointcloud.hpp"
#include "bpsm/pose.hpp"
#include "bpsm/posterior.hpp"
#include "bpsm/rng.hpp"
#include "bpsm/text_io.hpp"
