#ifndef ICE_ICE_HPP
#define ICE_ICE_HPP

#include "ice/archive.hpp"
#include "ice/common.hpp"
#include "ice/explainer.hpp"
#include "ice/fidelity.hpp"
#include "ice/image.hpp"
#include "ice/npy.hpp"
#include "ice/reducers.hpp"
#include "ice/render.hpp"
#include "ice/tensor.hpp"
#include "ice/zip.hpp"

#endif  // ICE_ICE_HPP
