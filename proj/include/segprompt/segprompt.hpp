#pragma once

#include "segprompt/errors.hpp"
#include "segprompt/rng.hpp"
#include "segprompt/tensor.hpp"
#include "segprompt/ops.hpp"
#include "segprompt/checkpoint.hpp"
#include "segprompt/nn.hpp"
#include "segprompt/vit.hpp"
#include "segprompt/segmap.hpp"
#include "segprompt/image.hpp"
#include "segprompt/model.hpp"
#include "segprompt/metrics.hpp"
#include "segprompt/dataset.hpp"
#include "segprompt/optim.hpp"
#include "segprompt/trainer.hpp"
#include "segprompt/pretext.hpp"
