#pragma once

#include "hiercode/analysis.hpp"
#include "hiercode/autodiff.hpp"
#include "hiercode/checkpoint.hpp"
#include "hiercode/feature_file.hpp"
#include "hiercode/fusion.hpp"
#include "hiercode/gse.hpp"
#include "hiercode/gsr.hpp"
#include "hiercode/hierarchy.hpp"
#include "hiercode/kg_data.hpp"
#include "hiercode/model.hpp"
#include "hiercode/rq.hpp"
#include "hiercode/struct_embedding.hpp"
#include "hiercode/tensor.hpp"
#include "hiercode/trainer.hpp"
