#pragma once

// Everything in one include.
#include "qsrec/binary_io.hpp"
#include "qsrec/checkpoint.hpp"
#include "qsrec/config.hpp"
#include "qsrec/data.hpp"
#include "qsrec/error.hpp"
#include "qsrec/evaluation.hpp"
#include "qsrec/inspect.hpp"
#include "qsrec/match_index.hpp"
#include "qsrec/model.hpp"
#include "qsrec/symmat.hpp"
#include "qsrec/tensor.hpp"
#include "qsrec/training.hpp"
