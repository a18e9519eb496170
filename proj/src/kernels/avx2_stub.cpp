#include "clickrefine/kernels/kernels.hpp"

namespace clickrefine::kernels {

const KernelTable* avx2_table() { return nullptr; }

}  // namespace clickrefine::kernels
