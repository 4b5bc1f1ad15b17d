from .layers import (BatchNormState, ConvFilterBank, ConvTrace, DenseLayer,
                     UninitializedStatsError, batchnorm_backward, batchnorm_forward,
                     dense_backward, dense_forward, dwa_align, dwa_conv_backward,
                     dwa_conv_forward, linear_conv_backward, linear_conv_forward,
                     output_length, softmax, softmax_cross_entropy)
from .model import (BUFFER_ORDER, PARAM_ORDER, ModelConfig, ModelState, init_model,
                    model_backward, model_forward, predict, zero_model)
