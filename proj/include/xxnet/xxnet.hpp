#pragma once

#include "xxnet/error.hpp"
#include "xxnet/tensor.hpp"
#include "xxnet/kernels.hpp"
#include "xxnet/autograd.hpp"
#include "xxnet/arch.hpp"
#include "xxnet/description.hpp"
#include "xxnet/analysis.hpp"
#include "xxnet/table2.hpp"
#include "xxnet/data.hpp"
#include "xxnet/model.hpp"
#include "xxnet/checkpoint.hpp"
#include "xxnet/train.hpp"
