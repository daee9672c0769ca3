"""quatnet: quaternion convolutional neural networks.

Quaternion algebra, three convolution paradigms (classic, geometric,
rotation-equivariant), pooling, split and fully quaternion activations,
four normalizations, explicit layer-local backpropagation, weight
initialization, real-to-quaternion data mappings, a training CLI, and a
scikit-learn style classifier facade.
"""

__version__ = "0.1.0"

from .errors import (
    CheckpointCorruptError,
    CheckpointMismatchError,
    ConfigError,
    DatasetError,
    NumericError,
    QuatnetError,
    ShapeError,
)
from .qcore import (
    PolarQuaternion,
    Quaternion,
    conjugate,
    from_polar,
    hamilton,
    left_rotate,
    magnitude,
    sandwich,
    to_polar,
    versor,
)
from .qtensor import (
    QTensor,
    load_qt,
    pack_channels,
    save_qt,
    unpack_channels,
    window,
)
from .qconv import (
    ConvSpec,
    GeometricKernel,
    combine_autoencoder,
    combine_pyramidal,
    combine_summed,
    conv_left,
    conv_right,
    conv_twosided,
    layer_classic,
    layer_equivariant,
    layer_geometric,
)
from .qlayers import (
    BNState,
    SpectralState,
    act_rerelu,
    act_split,
    bn_rqbn,
    bn_vqbn,
    bn_wqbn,
    fc_classic,
    fc_geometric,
    pool_fully_magnitude,
    pool_split_avg,
    pool_split_max,
    spectral_normalize,
)
from .qinit import InitSpec, init_classic, init_geometric
from .network import Network
from .qtrain import (
    TrainConfig,
    backward_activation,
    backward_classic,
    backward_geometric,
    gradient_check,
    loss_crossentropy_magnitude,
    loss_mse_real,
    sgd_step,
    train_network,
)
from .qdata import (
    Dataset,
    load_dataset,
    map_derivative_stack,
    map_grayscale,
    map_pointcloud,
    map_rgb,
    save_dataset,
    synth_pattern,
)
from .estimator import QCNNClassifier

__all__ = [name for name in dir() if not name.startswith("_")]
