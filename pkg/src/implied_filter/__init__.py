"""Implied filtering densities on volatility's hidden state."""
