#pragma once

#include "aimfscil/array_bundle.hpp"
#include "aimfscil/backbone.hpp"
#include "aimfscil/block_analysis.hpp"
#include "aimfscil/common.hpp"
#include "aimfscil/dataset.hpp"
#include "aimfscil/feature_cache.hpp"
#include "aimfscil/features.hpp"
#include "aimfscil/head.hpp"
#include "aimfscil/log.hpp"
#include "aimfscil/preprocess.hpp"
#include "aimfscil/safetensors.hpp"
#include "aimfscil/session.hpp"
#include "aimfscil/synthetic.hpp"
#include "aimfscil/teen.hpp"
#include "aimfscil/vit.hpp"
