#include <pybind11/pybind11.h>

PYBIND11_MODULE(latentlab, m) {
  m.doc() = "latent image synthesis laboratory (placeholder)";
}
