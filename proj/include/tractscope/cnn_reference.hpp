#pragma once

// Serial, loop-literal twins of the forward kernels. These exist so the fast
// engine has an independent implementation to be checked against, and so the
// benchmark target can measure the gap. Do not "optimize" these.

#include "tractscope/cnn.hpp"

namespace tractscope::cnn::reference {

Tensor conv2d(const Tensor& input, const ConvLayer& layer);
Tensor max_pool(const Tensor& input, const MaxPoolLayer& layer);
Tensor lrn(const Tensor& input, const LrnLayer& layer);
Tensor fully_connected(const Tensor& input, const FcLayer& layer);
Tensor apply_layer(const Tensor& input, const Layer& layer);
FeatureVector forward_to_layer(const NetworkSpec& net, const Tensor& input,
                               const std::string& layer_name);

}  // namespace tractscope::cnn::reference
