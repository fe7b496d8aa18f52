#pragma once

#include "ceat/attacks.hpp"
#include "ceat/checkpoint.hpp"
#include "ceat/cli.hpp"
#include "ceat/config.hpp"
#include "ceat/dataset.hpp"
#include "ceat/ensemble.hpp"
#include "ceat/errors.hpp"
#include "ceat/eval.hpp"
#include "ceat/gradcheck.hpp"
#include "ceat/model.hpp"
#include "ceat/tensor.hpp"
#include "ceat/trainer.hpp"
