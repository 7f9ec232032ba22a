from .client import BaselineClient, FedWeITClient
from .ledger import C2S, S2C, CommLedger, CommRecord
from .payload import (PayloadKind, SparsePayload, dense_payload, deserialize, serialize, sparsify_topk,
                      topk_count)
from .runner import Federation, FederationConfig, RunResult
from .server import KnowledgeBase, aggregate_global, apply_global, kb_add, kb_sample, sample_clients
