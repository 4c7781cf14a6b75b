#pragma once

// Umbrella header: 3-D shifted-window transformer encoder + U-shaped decoder,
// self-supervised pre-training heads, volume I/O, metrics and the training
// harness.

#include "swinvox/checkpoint.hpp"
#include "swinvox/config.hpp"
#include "swinvox/decoder.hpp"
#include "swinvox/grad_check.hpp"
#include "swinvox/infer.hpp"
#include "swinvox/metrics.hpp"
#include "swinvox/ops.hpp"
#include "swinvox/optim.hpp"
#include "swinvox/params.hpp"
#include "swinvox/phantom.hpp"
#include "swinvox/rng.hpp"
#include "swinvox/ssl.hpp"
#include "swinvox/swin.hpp"
#include "swinvox/tape.hpp"
#include "swinvox/tensor.hpp"
#include "swinvox/trainer.hpp"
#include "swinvox/volume.hpp"
