"""Sepsis risk scoring with a GCN over a patient/feature bipartite graph built from EHR triplets."""

__version__ = "0.1.0"
