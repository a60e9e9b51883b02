# Gunicorn configuration file
# Server socket
bind = "0.0.0.0:8080"

# Worker processes
workers = 2
threads = 4
worker_class = "uvicorn.workers.UvicornWorker"

# Timeout settings
timeout = 120  # Long recordings take a while to segment
keepalive = 5
graceful_timeout = 30

# Worker settings
max_requests = 1000
max_requests_jitter = 50
worker_connections = 1000

# Logging
accesslog = "-"
errorlog = "-"
loglevel = "info"

# Process naming
proc_name = "blink-segmentation-service"

# Each worker loads its own checkpoint copy in the lifespan
preload_app = False
