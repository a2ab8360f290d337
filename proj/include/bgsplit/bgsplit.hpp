#ifndef BGSPLIT_BGSPLIT_HPP
#define BGSPLIT_BGSPLIT_HPP

#include "bgsplit/error.hpp"
#include "bgsplit/rng.hpp"
#include "bgsplit/losses.hpp"
#include "bgsplit/model.hpp"
#include "bgsplit/gradients.hpp"
#include "bgsplit/trainer.hpp"
#include "bgsplit/dataset.hpp"
#include "bgsplit/pseudolabel.hpp"
#include "bgsplit/metrics.hpp"
#include "bgsplit/io.hpp"
#include "bgsplit/experiment.hpp"

#endif  // BGSPLIT_BGSPLIT_HPP
