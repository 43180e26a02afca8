// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "upcycle/dataset.hpp"

namespace upcycle {

// Gaussian class clusters in a shared input space with a per-task random
// rotation, so tasks are related but distinct. Class centroids depend only on
// (n_classes, input_dim); the rotation, sampling, label noise and outliers
// are driven by the task seed. Noise and outliers touch the train split only.
TaskData generate(const TaskSpec& spec);

}  // namespace upcycle
