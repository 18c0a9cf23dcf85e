#ifndef MULTIFUSE_MULTIFUSE_HPP
#define MULTIFUSE_MULTIFUSE_HPP

#include "multifuse/attribution.hpp"
#include "multifuse/compute_graph.hpp"
#include "multifuse/config.hpp"
#include "multifuse/connectomics.hpp"
#include "multifuse/errors.hpp"
#include "multifuse/fusion_model.hpp"
#include "multifuse/graph_nn.hpp"
#include "multifuse/mmt1.hpp"
#include "multifuse/ops.hpp"
#include "multifuse/pipeline.hpp"
#include "multifuse/rng.hpp"
#include "multifuse/stats.hpp"
#include "multifuse/synthcohort.hpp"
#include "multifuse/tensor.hpp"
#include "multifuse/trainer.hpp"

#endif
