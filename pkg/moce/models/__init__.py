from .embedding import SequenceEmbedding, EmbeddingSet
from .kmeans import KMeansModel, ClusterAssignment, ElbowReport
from .feed_forward import FeedForward
from .moce_layer import AdapterExpert, ExpertGroup, MoCELayer, RoutingRecord
from .sequence import EncodedSequence
from .transformer import DenseTransformer, MoCEModel
