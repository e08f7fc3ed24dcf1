#pragma once

#include "fsqat/adam.hpp"
#include "fsqat/autodiff.hpp"
#include "fsqat/checkpoint.hpp"
#include "fsqat/classifier.hpp"
#include "fsqat/config.hpp"
#include "fsqat/data.hpp"
#include "fsqat/grad_check.hpp"
#include "fsqat/gradcheck_suite.hpp"
#include "fsqat/harness.hpp"
#include "fsqat/io.hpp"
#include "fsqat/localize.hpp"
#include "fsqat/matrix.hpp"
#include "fsqat/meta.hpp"
#include "fsqat/metrics.hpp"
#include "fsqat/parallel.hpp"
#include "fsqat/pipeline.hpp"
#include "fsqat/qat.hpp"
#include "fsqat/rng.hpp"
#include "fsqat/synthetic.hpp"
