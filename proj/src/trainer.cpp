#include "latentlab/tensor.hpp"
