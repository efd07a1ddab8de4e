"""OrliczFlow: gradient flows of convex modular energies on Musielak-Orlicz spaces"""
