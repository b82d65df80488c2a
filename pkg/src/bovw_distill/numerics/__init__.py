from .functional import (
    BN_EPS,
    NORM_EPS,
    batch_norm,
    bilinear_resize,
    conv2d,
    cosine_sim,
    crop_and_resize,
    cross_entropy,
    interp_matrix,
    l2_normalize,
    linear,
    pairwise_cosine,
    roi_resample,
    separable_resample,
    smooth_l1,
)
from .gradcheck import GradcheckReport, NonFiniteError, gradcheck
from .nn import BatchNorm, Conv2d, Linear, Module, Parameter, ReLU, Sequential, conv_bn_relu, freeze_batchnorm
from .optim import SGD, AdamW, MissingGradientError, MultiStepSchedule
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    ensure_tensor,
    exp,
    is_grad_enabled,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    softmax,
    stack,
    sum,
    tensor,
    where,
)
