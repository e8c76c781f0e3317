#pragma once

#include "agnn/analysis.hpp"
#include "agnn/attention.hpp"
#include "agnn/checkpoint.hpp"
#include "agnn/config.hpp"
#include "agnn/episodes.hpp"
#include "agnn/errors.hpp"
#include "agnn/io.hpp"
#include "agnn/random.hpp"
#include "agnn/task.hpp"
#include "agnn/tensor.hpp"
#include "agnn/training.hpp"
