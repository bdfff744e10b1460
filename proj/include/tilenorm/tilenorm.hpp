#pragma once

#include "tilenorm/diagnose.hpp"
#include "tilenorm/infer.hpp"
#include "tilenorm/io.hpp"
#include "tilenorm/kernels.hpp"
#include "tilenorm/layers.hpp"
#include "tilenorm/normalize.hpp"
#include "tilenorm/prng.hpp"
#include "tilenorm/repro.hpp"
#include "tilenorm/stats.hpp"
#include "tilenorm/synthdata.hpp"
#include "tilenorm/tensor.hpp"
#include "tilenorm/train.hpp"
#include "tilenorm/unet.hpp"
