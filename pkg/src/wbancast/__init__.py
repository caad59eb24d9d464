"""Markov-chain model and CSMA/CA simulator for multi-hop broadcast in body-area networks."""
