#pragma once

// Umbrella header.

#include "cem/batch.hpp"
#include "cem/cli.hpp"
#include "cem/config.hpp"
#include "cem/corpus.hpp"
#include "cem/errors.hpp"
#include "cem/eval.hpp"
#include "cem/knowledge.hpp"
#include "cem/model.hpp"
#include "cem/objective.hpp"
#include "cem/synthetic.hpp"
#include "cem/tensor.hpp"
#include "cem/text.hpp"
#include "cem/trainer.hpp"
